//! Property tests over the numeric core and the library's stated invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use tce::checkpoint::{load_tensors, save_tensors, Precision};
use tce::config::RunConfig;
use tce::eval::metrics_from_ranks;
use tce::gradcheck::{grad_check, GradCheckOptions};
use tce::graph::Graph;
use tce::joint::{ranking_loss, SimilarityMatrix};
use tce::params::ParamStore;
use tce::query::{self, TreeMode};
use tce::tensor::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    // analytic gradients of a composite of the primitive ops match finite
    // differences over random shapes and values
    #[test]
    fn primitive_chain_gradients_match_fd(
        m in 1usize..4,
        k in 1usize..4,
        // layernorm needs at least two columns to vary
        n in 2usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert("a", Tensor::uniform(&[m, k], 1.0, &mut rng)).unwrap();
        store.insert("b", Tensor::uniform(&[k, n], 1.0, &mut rng)).unwrap();
        store.insert("bias", Tensor::uniform(&[n], 1.0, &mut rng)).unwrap();
        // distinct per-coordinate weights: a plain mean of a layer-normalized
        // row is identically zero and would probe nothing
        let probe = Tensor::uniform(&[m, n], 1.0, &mut rng);
        let report = grad_check(
            &store,
            move |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let bias = g.param(s, "bias")?;
                let prod = g.matmul(a, b)?;
                let shifted = g.add_row(prod, bias)?;
                let squashed = g.tanh(shifted)?;
                let gated = g.sigmoid(squashed)?;
                let normed = g.layernorm_rows(gated, 1e-5)?;
                let weights = g.constant(probe.clone())?;
                let weighted = g.mul(normed, weights)?;
                g.sum_all(weighted)
            },
            &GradCheckOptions { seed, ..Default::default() },
        ).unwrap();
        prop_assert!(report.passes(1e-4), "{report}");
    }

    // masked softmax: nonnegative, sums to one, masked entries exactly zero
    #[test]
    fn masked_softmax_contract(
        logits in finite_vec(6),
        mask_bits in proptest::collection::vec(any::<bool>(), 6),
    ) {
        prop_assume!(mask_bits.iter().any(|&b| b));
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(logits)).unwrap();
        let s = g.softmax_vec(x, Some(mask_bits.clone())).unwrap();
        let out = g.value(s).data();
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for (v, live) in out.iter().zip(&mask_bits) {
            if *live {
                prop_assert!(*v >= 0.0);
            } else {
                prop_assert!(*v == 0.0);
            }
        }
    }

    // ranking loss equals a brute-force evaluation when every negative is used
    #[test]
    fn full_negative_loss_matches_brute_force(
        b in 2usize..8,
        seed in 0u64..1000,
        margin in 0.05f64..0.8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..b * b)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let s = SimilarityMatrix::from_scores(b, scores).unwrap();
        let loss = ranking_loss(&s, margin, b - 1, None).unwrap();
        let mut brute = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    brute += (margin + s.at(i, j) - s.at(i, i)).max(0.0);
                }
            }
        }
        brute /= (b - 1) as f64;
        prop_assert!((loss - brute).abs() < 1e-12);
    }

    // R@K monotone in K; MedR consistent with the rank multiset
    #[test]
    fn metrics_consistency(ranks in proptest::collection::vec(1usize..100, 1..40)) {
        let m = metrics_from_ranks(ranks.clone());
        prop_assert!(m.r1 <= m.r5 && m.r5 <= m.r10);
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        prop_assert_eq!(m.medr, sorted[(sorted.len() - 1) / 2]);
        let below = sorted.iter().filter(|&&r| r < m.medr).count();
        let at_or_below = sorted.iter().filter(|&&r| r <= m.medr).count();
        prop_assert!(below <= sorted.len() / 2 && at_or_below >= sorted.len() / 2);
    }

    // double-precision checkpoints round-trip bitwise
    #[test]
    fn checkpoint_roundtrip_bitwise(
        values in proptest::collection::vec(
            prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(-0.0), Just(1e-300)],
            1..20,
        ),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tcem");
        let mut tensors = BTreeMap::new();
        tensors.insert("x".to_string(), Tensor::vector(values.clone()));
        save_tensors(&path, &tensors, Precision::Double).unwrap();
        let back = load_tensors(&path).unwrap();
        let restored = back["x"].data();
        prop_assert_eq!(restored.len(), values.len());
        for (a, b) in restored.iter().zip(&values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // every tree over 2..=12 leaves is a full binary bracketing with
    // untouched global memory
    #[test]
    fn tree_shape_and_memory_immutability(n in 2usize..13, seed in 0u64..500) {
        let cfg = RunConfig {
            d_w: 4, d_t: 5, d_ta: 3, d_v: 5, d_va: 3, heads: 1, head_dim: 2,
            d_star: 5, frames: 2, batch: 2, seed,
            ..Default::default()
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        query::init_params(&mut store, &cfg, 20, &mut init_rng).unwrap();
        let tokens: Vec<usize> = (0..n)
            .map(|i| 2 + ((seed as usize + i * 7) % 18))
            .collect();
        let mut g = Graph::new();
        let embedded = query::embed_tokens(&mut g, &store, &tokens).unwrap();
        let (leaves, memory) = query::leaf_transform(&mut g, &store, &cfg, embedded).unwrap();
        let before: Vec<u64> = g.value(memory).data().iter().map(|v| v.to_bits()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let tree = query::build_tree(
            &mut g, &store, &cfg, leaves, memory,
            &mut TreeMode::Train { rng: &mut rng },
        ).unwrap();
        prop_assert_eq!(tree.constituents.len(), n - 1);
        prop_assert_eq!(tree.constituents.last().unwrap().span, (0, n));
        let after: Vec<u64> = g.value(memory).data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(before, after);
    }
}

//! Joint text-video embedding space: projections, cosine matching, and the
//! batch-hard margin ranking loss.

use crate::checkpoint::{save_tensors, Precision};
use crate::config::RunConfig;
use crate::error::{Result, TceError};
use crate::graph::{hard_negatives, Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::RngCore;
use std::collections::BTreeMap;
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which side of the joint space a vector comes from; selects the projection
/// and batch-norm parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Video,
}

impl Side {
    fn proj_prefix(self) -> &'static str {
        match self {
            Side::Query => "joint.query_proj",
            Side::Video => "joint.video_proj",
        }
    }

    pub fn bn_prefix(self) -> &'static str {
        match self {
            Side::Query => "joint.query_bn",
            Side::Video => "joint.video_bn",
        }
    }
}

/// Registers projection and normalization parameters per config.
pub fn init_params(store: &mut ParamStore, cfg: &RunConfig, rng: &mut dyn RngCore) -> Result<()> {
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    if cfg.use_projections {
        for (side, d_in) in [(Side::Query, cfg.d_t), (Side::Video, cfg.d_v)] {
            let p = side.proj_prefix();
            store.insert(&format!("{p}.w"), Tensor::uniform(&[cfg.d_star, d_in], fan(d_in), rng))?;
            store.insert(&format!("{p}.b"), Tensor::zeros(&[cfg.d_star]))?;
        }
    }
    if cfg.normalize {
        for side in [Side::Query, Side::Video] {
            let p = side.bn_prefix();
            store.insert(&format!("{p}.gamma"), Tensor::vector(vec![1.0; cfg.d_star]))?;
            store.insert(&format!("{p}.beta"), Tensor::zeros(&[cfg.d_star]))?;
            store.insert_buffer(&format!("{p}.running_mean"), Tensor::zeros(&[cfg.d_star]))?;
            store.insert_buffer(&format!("{p}.running_var"), Tensor::vector(vec![1.0; cfg.d_star]))?;
        }
    }
    Ok(())
}

/// Maps a `[B, d]` matrix of encoder outputs into the joint space: optional
/// affine projection, then (when normalizing) batch norm and tanh. Train mode
/// uses batch statistics and records a running-buffer update; eval mode
/// normalizes with the stored running statistics.
pub fn project_rows(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    x: NodeId,
    side: Side,
    train: bool,
) -> Result<NodeId> {
    let mut out = x;
    if cfg.use_projections {
        let p = side.proj_prefix();
        let w = g.param(store, &format!("{p}.w"))?;
        let b = g.param(store, &format!("{p}.b"))?;
        let wt = g.transpose(w)?;
        out = g.matmul(out, wt)?;
        out = g.add_row(out, b)?;
    }
    if cfg.normalize {
        let p = side.bn_prefix();
        let gamma = g.param(store, &format!("{p}.gamma"))?;
        let beta = g.param(store, &format!("{p}.beta"))?;
        out = if train {
            g.batchnorm_train(out, gamma, beta, BN_EPS, Some(p))?
        } else {
            let mean = store.buffer(&format!("{p}.running_mean"))?.clone();
            let var = store.buffer(&format!("{p}.running_var"))?.clone();
            g.batchnorm_eval(out, gamma, beta, &mean, &var, BN_EPS)?
        };
        out = g.tanh(out)?;
    }
    Ok(out)
}

/// Single-vector projection in inference mode (running-stat normalization).
pub fn project_vec(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    v: NodeId,
    side: Side,
) -> Result<NodeId> {
    let rows = g.stack_rows(&[v])?;
    let projected = project_rows(g, store, cfg, rows, side, false)?;
    g.row(projected, 0)
}

/// Cosine similarity of two vectors; zero-norm inputs are an error. The
/// result is clamped into [-1, 1] against rounding spill.
pub fn cosine(q: &Tensor, v: &Tensor) -> Result<f64> {
    if q.shape() != v.shape() || q.rank() != 1 {
        return Err(TceError::Shape {
            op: "cosine",
            detail: format!("{:?} vs {:?}", q.shape(), v.shape()),
        });
    }
    let (nq, nv) = (q.l2_norm(), v.l2_norm());
    if nq == 0.0 || nv == 0.0 {
        return Err(TceError::ZeroNorm);
    }
    let dot: f64 = q.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * nv)).clamp(-1.0, 1.0))
}

/// B x B cosine scores; entry (i, j) matches query i against video j, so the
/// diagonal holds the positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_scores(size: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != size * size {
            return Err(TceError::Shape {
                op: "similarity_matrix",
                detail: format!("{} scores for size {size}", scores.len()),
            });
        }
        Ok(SimilarityMatrix { size, scores })
    }

    pub fn from_embeddings(queries: &[Tensor], videos: &[Tensor]) -> Result<Self> {
        if queries.len() != videos.len() {
            return Err(TceError::Shape {
                op: "similarity_matrix",
                detail: format!("{} queries vs {} videos", queries.len(), videos.len()),
            });
        }
        let b = queries.len();
        let mut scores = Vec::with_capacity(b * b);
        for q in queries {
            for v in videos {
                scores.push(cosine(q, v)?);
            }
        }
        Ok(SimilarityMatrix { size: b, scores })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.size + j]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Differentiable similarity matrix: L2-normalize the rows of both `[B, d]`
/// stacks and take all pairwise dot products.
pub fn similarity_graph(g: &mut Graph, queries: NodeId, videos: NodeId) -> Result<NodeId> {
    let qn = g.row_l2_normalize(queries)?;
    let vn = g.row_l2_normalize(videos)?;
    let vt = g.transpose(vn)?;
    g.matmul(qn, vt)
}

/// Hard-negative sets per query: the top `n_hard` off-diagonal columns by
/// score (ties -> lower index), optionally filtered by an eligibility mask.
pub fn hard_negative_sets(
    s: &SimilarityMatrix,
    n_hard: usize,
    eligible: Option<&[bool]>,
) -> Result<Vec<Vec<usize>>> {
    (0..s.size).map(|i| hard_negatives(&s.scores, s.size, i, n_hard, eligible)).collect()
}

/// Margin ranking loss over a similarity matrix, literal form: the summed
/// hinges over each query's hard-negative set, divided by `n_hard` only.
pub fn ranking_loss(
    s: &SimilarityMatrix,
    margin: f64,
    n_hard: usize,
    eligible: Option<&[bool]>,
) -> Result<f64> {
    let sets = hard_negative_sets(s, n_hard, eligible)?;
    let mut loss = 0.0;
    for (i, negs) in sets.iter().enumerate() {
        for &j in negs {
            loss += (margin + s.at(i, j) - s.at(i, i)).max(0.0);
        }
    }
    Ok(loss / n_hard as f64)
}

/// Writes a retrieval dump: tensors `query_embeddings` and `video_embeddings`
/// (both `[B, d]`) plus a UTF-8 index file with one id per line, line number
/// = row.
pub fn dump_embeddings<P: AsRef<Path>>(
    container_path: P,
    index_path: P,
    ids: &[String],
    queries: &[Tensor],
    videos: &[Tensor],
) -> Result<()> {
    fn stack(rows: &[Tensor]) -> Result<Tensor> {
        let d = rows.first().map(Tensor::numel).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend_from_slice(r.data());
        }
        Tensor::matrix(rows.len(), d, data)
    }
    let mut tensors = BTreeMap::new();
    tensors.insert("query_embeddings".to_string(), stack(queries)?);
    tensors.insert("video_embeddings".to_string(), stack(videos)?);
    save_tensors(container_path, &tensors, Precision::Double)?;
    let mut index = String::new();
    for id in ids {
        index.push_str(id);
        index.push('\n');
    }
    std::fs::write(index_path.as_ref(), index)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(data: Vec<f64>) -> Tensor {
        Tensor::vector(data)
    }

    #[test]
    fn cosine_identical_orthogonal_antipodal() {
        let q = unit(vec![0.3, -0.4]);
        assert_eq!(cosine(&q, &q).unwrap(), 1.0);
        let a = unit(vec![1.0, 0.0]);
        let b = unit(vec![0.0, 2.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        let neg = unit(vec![-0.3, 0.4]);
        assert_eq!(cosine(&q, &neg).unwrap(), -1.0);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let q = unit(vec![0.0, 0.0]);
        let v = unit(vec![1.0, 0.0]);
        assert!(matches!(cosine(&q, &v), Err(TceError::ZeroNorm)));
    }

    #[test]
    fn similarity_matrix_basics() {
        let one = SimilarityMatrix::from_embeddings(&[unit(vec![1.0])], &[unit(vec![2.0])]).unwrap();
        assert_eq!(one.size(), 1);
        assert_eq!(one.at(0, 0), 1.0);

        // all queries equal and all videos equal -> constant matrix
        let qs = vec![unit(vec![1.0, 2.0]); 3];
        let vs = vec![unit(vec![-1.0, 0.5]); 3];
        let s = SimilarityMatrix::from_embeddings(&qs, &vs).unwrap();
        let first = s.at(0, 0);
        assert!(s.scores().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn rank_order_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[6], 1.0, &mut rng)).collect();
        let vs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[6], 1.0, &mut rng)).collect();
        let s = SimilarityMatrix::from_embeddings(&qs, &vs).unwrap();
        let scaled: Vec<Tensor> = qs
            .iter()
            .enumerate()
            .map(|(i, q)| {
                Tensor::vector(q.data().iter().map(|v| v * (1.0 + i as f64 * 3.0)).collect())
            })
            .collect();
        let s2 = SimilarityMatrix::from_embeddings(&scaled, &vs).unwrap();
        for i in 0..4 {
            let order = |m: &SimilarityMatrix| {
                let mut idx: Vec<usize> = (0..4).collect();
                idx.sort_by(|&a, &b| m.at(i, b).partial_cmp(&m.at(i, a)).unwrap().then(a.cmp(&b)));
                idx
            };
            assert_eq!(order(&s), order(&s2));
        }
    }

    #[test]
    fn ranking_loss_worked_examples() {
        let s = SimilarityMatrix::from_scores(2, vec![0.9, 0.1, 0.0, 0.8]).unwrap();
        assert_eq!(ranking_loss(&s, 0.2, 1, None).unwrap(), 0.0);

        let s = SimilarityMatrix::from_scores(2, vec![0.5, 0.6, 0.3, 0.4]).unwrap();
        let loss = ranking_loss(&s, 0.2, 1, None).unwrap();
        assert!((loss - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ranking_loss_single_pair_is_error() {
        let s = SimilarityMatrix::from_scores(1, vec![1.0]).unwrap();
        assert!(matches!(ranking_loss(&s, 0.2, 1, None), Err(TceError::NoNegatives)));
    }

    #[test]
    fn full_negative_set_equals_average_over_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = 5;
        let scores: Vec<f64> = (0..b * b).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let s = SimilarityMatrix::from_scores(b, scores).unwrap();
        let loss = ranking_loss(&s, 0.2, b - 1, None).unwrap();
        // brute force: hinge over every negative, averaged by |N^h| = b-1
        let mut expected = 0.0;
        for i in 0..b {
            for j in 0..b {
                if j != i {
                    expected += (0.2 + s.at(i, j) - s.at(i, i)).max(0.0);
                }
            }
        }
        expected /= (b - 1) as f64;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_iff_all_margins_satisfied() {
        // every positive beats every negative by > margin
        let s = SimilarityMatrix::from_scores(3, vec![0.9, 0.1, 0.2, 0.0, 0.8, 0.3, 0.1, 0.2, 0.95])
            .unwrap();
        assert_eq!(ranking_loss(&s, 0.2, 2, None).unwrap(), 0.0);
        // shrink one diagonal below the margin and the loss turns positive
        let s = SimilarityMatrix::from_scores(3, vec![0.25, 0.1, 0.2, 0.0, 0.8, 0.3, 0.1, 0.2, 0.95])
            .unwrap();
        assert!(ranking_loss(&s, 0.2, 2, None).unwrap() > 0.0);
    }

    #[test]
    fn monotone_in_off_diagonal_and_antitone_in_diagonal() {
        let base = vec![0.5, 0.45, 0.2, 0.55];
        let s0 = SimilarityMatrix::from_scores(2, base.clone()).unwrap();
        let l0 = ranking_loss(&s0, 0.2, 1, None).unwrap();

        let mut harder = base.clone();
        harder[1] += 0.05; // raise a negative
        let l1 = ranking_loss(&SimilarityMatrix::from_scores(2, harder).unwrap(), 0.2, 1, None)
            .unwrap();
        assert!(l1 >= l0);

        let mut easier = base;
        easier[0] += 0.05; // raise a positive
        let l2 = ranking_loss(&SimilarityMatrix::from_scores(2, easier).unwrap(), 0.2, 1, None)
            .unwrap();
        assert!(l2 <= l0);
    }

    #[test]
    fn eligibility_mask_excludes_duplicates() {
        let s = SimilarityMatrix::from_scores(3, vec![0.5, 0.9, 0.1, 0.2, 0.6, 0.1, 0.3, 0.2, 0.7])
            .unwrap();
        // treat column 1 as a duplicate positive for query 0
        let mut eligible = vec![true; 9];
        eligible[1] = false;
        let sets = hard_negative_sets(&s, 1, Some(&eligible)).unwrap();
        assert_eq!(sets[0], vec![2]);
        let unrestricted = hard_negative_sets(&s, 1, None).unwrap();
        assert_eq!(unrestricted[0], vec![1]);
    }

    #[test]
    fn graph_loss_matches_numeric_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let b = 4;
            let scores: Vec<f64> =
                (0..b * b).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let s = SimilarityMatrix::from_scores(b, scores.clone()).unwrap();
            let numeric = ranking_loss(&s, 0.2, 2, None).unwrap();
            let mut g = Graph::new();
            let node = g.constant(Tensor::matrix(b, b, scores).unwrap()).unwrap();
            let loss = g.hinge_rank_loss(node, 0.2, 2, None).unwrap();
            assert!((g.value(loss).item() - numeric).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_identity_case() {
        // identity weight, zero bias, normalization off: output equals input
        let cfg = RunConfig {
            d_t: 3,
            d_v: 3,
            d_star: 3,
            use_projections: true,
            normalize: false,
            ..RunConfig::desk()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_params(&mut store, &cfg, &mut rng).unwrap();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *store.get_mut("joint.query_proj.w").unwrap() = eye;
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.25, -1.5, 3.0])).unwrap();
        let out = project_vec(&mut g, &store, &cfg, v, Side::Query).unwrap();
        assert_eq!(g.value(out).data(), &[0.25, -1.5, 3.0]);
    }

    #[test]
    fn normalized_projection_lands_in_tanh_range() {
        let cfg = RunConfig { d_t: 4, d_v: 4, d_star: 4, batch: 4, ..RunConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_params(&mut store, &cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[4, 4], 5.0, &mut rng)).unwrap();
        let out = project_rows(&mut g, &store, &cfg, x, Side::Video, true).unwrap();
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
        let updates = g.take_bn_updates();
        assert_eq!(updates.len(), 1);
        assert_eq!(updates[0].prefix, "joint.video_bn");
    }
}

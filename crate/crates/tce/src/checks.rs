//! Finite-difference verification suite over every differentiable module.
//!
//! Each check builds a small instance of one module with its inputs exposed
//! as parameters, so the checker probes weights and activations alike. All
//! builders are deterministic in the given seed.

use crate::config::RunConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::joint::{self, Side};
use crate::params::ParamStore;
use crate::query::{self, NodeState, SemanticTree, TreeLink};
use crate::tensor::Tensor;
use crate::video::{self, FrameFeatures};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;

pub struct ModuleCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.passes(GRAD_TOL)
    }
}

fn tiny_config() -> RunConfig {
    RunConfig {
        d_w: 4,
        d_t: 4,
        d_ta: 3,
        d_v: 4,
        d_va: 3,
        heads: 2,
        head_dim: 2,
        d_star: 4,
        frames: 3,
        batch: 3,
        n_hard: 2,
        ..Default::default()
    }
}

fn probe(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    store.insert(name, Tensor::uniform(shape, 1.0, rng)).expect("unique probe name");
}

fn node_state(g: &mut Graph, s: &ParamStore, h: &str, c: &str, span: (usize, usize)) -> Result<NodeState> {
    Ok(NodeState { hidden: g.param(s, h)?, cell: g.param(s, c)?, span })
}

/// Loss = probe . output, which gives every output coordinate a distinct
/// weight so symmetric errors cannot cancel.
fn probed_loss(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.constant(weights.clone())?;
    if weights.rank() == 1 {
        g.dot(out, w)
    } else {
        let prod = g.mul(out, w)?;
        g.sum_all(prod)
    }
}

fn check_treelstm(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("query.compose.w", Tensor::uniform(&[5 * cfg.d_t, 2 * cfg.d_t], 0.5, &mut rng))?;
    store.insert("query.compose.b", Tensor::uniform(&[5 * cfg.d_t], 0.5, &mut rng))?;
    for name in ["left_h", "left_c", "right_h", "right_c"] {
        probe(&mut store, name, &[cfg.d_t], &mut rng);
    }
    let weights = Tensor::uniform(&[2 * cfg.d_t], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let left = node_state(g, s, "left_h", "left_c", (0, 1))?;
            let right = node_state(g, s, "right_h", "right_c", (1, 2))?;
            let parent = query::treelstm_compose(g, s, &left, &right)?;
            let cat = g.concat(&[parent.hidden, parent.cell])?;
            probed_loss(g, cat, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "treelstm_cell", report })
}

fn check_memory_scorer(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_t;
    store.insert("query.score.key_w", Tensor::uniform(&[d, d], 0.5, &mut rng))?;
    store.insert("query.score.key_b", Tensor::uniform(&[d], 0.5, &mut rng))?;
    store.insert("query.score.mlp_w", Tensor::uniform(&[2 * d, 2 * d], 0.5, &mut rng))?;
    store.insert("query.score.mlp_b", Tensor::uniform(&[2 * d], 0.5, &mut rng))?;
    store.insert("query.score.out_w", Tensor::uniform(&[2 * d], 0.5, &mut rng))?;
    probe(&mut store, "memory", &[3, d], &mut rng);
    probe(&mut store, "cand0_h", &[d], &mut rng);
    probe(&mut store, "cand1_h", &[d], &mut rng);
    let weights = Tensor::uniform(&[2], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let memory = g.param(s, "memory")?;
            let zero = g.constant(Tensor::zeros(&[cfg.d_t]))?;
            let candidates = vec![
                NodeState { hidden: g.param(s, "cand0_h")?, cell: zero, span: (0, 2) },
                NodeState { hidden: g.param(s, "cand1_h")?, cell: zero, span: (1, 3) },
            ];
            let scores = query::score_candidates(g, s, &cfg, &candidates, memory)?;
            probed_loss(g, scores, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "memory_scorer", report })
}

fn check_constituent_attention(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("query.attn.w", Tensor::uniform(&[cfg.d_ta, cfg.d_t], 0.5, &mut rng))?;
    store.insert("query.attn.b", Tensor::uniform(&[cfg.d_ta], 0.5, &mut rng))?;
    store.insert("query.attn.u", Tensor::uniform(&[cfg.d_ta], 0.5, &mut rng))?;
    for i in 0..3 {
        probe(&mut store, &format!("node{i}"), &[cfg.d_t], &mut rng);
    }
    let weights = Tensor::uniform(&[cfg.d_t], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let mut constituents = Vec::new();
            let mut children = Vec::new();
            for i in 0..3 {
                let h = g.param(s, &format!("node{i}"))?;
                constituents.push(NodeState { hidden: h, cell: h, span: (0, i + 2) });
                children.push((TreeLink::Leaf(i), TreeLink::Leaf(i + 1)));
            }
            let leaf = constituents[0];
            let mut tree = SemanticTree {
                leaves: vec![leaf],
                constituents,
                children,
                merges: vec![0; 3],
                selections: vec![],
                layers: vec![],
                node_weights: vec![],
            };
            let pooled = query::attend_constituents(g, s, &cfg, &mut tree)?;
            probed_loss(g, pooled, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "constituent_attention", report })
}

fn check_gru(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let frame_dim = 3;
    video::init_params(&mut store, &cfg, frame_dim, &mut rng)?;
    let frames = FrameFeatures::new(
        "probe".into(),
        Tensor::uniform(&[cfg.frames, frame_dim], 1.0, &mut rng),
        vec![true; cfg.frames],
    )?;
    let weights = Tensor::uniform(&[cfg.frames, cfg.d_v], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let seq = video::sequence_encode(g, s, &cfg, &frames)?;
            probed_loss(g, seq, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "gru", report })
}

fn check_multihead_attention(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    video::init_params(&mut store, &cfg, 3, &mut rng)?;
    probe(&mut store, "seq", &[cfg.frames, cfg.d_v], &mut rng);
    let mask = vec![true, true, false];
    let weights = Tensor::uniform(&[cfg.frames, cfg.d_v], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let seq = g.param(s, "seq")?;
            let out = video::multihead_self_attention(g, s, &cfg, seq, &mask)?;
            probed_loss(g, out, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "multihead_attention", report })
}

fn check_temporal_attention(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.insert("video.attn.w", Tensor::uniform(&[cfg.d_va, cfg.d_v], 0.5, &mut rng))?;
    store.insert("video.attn.b", Tensor::uniform(&[cfg.d_va], 0.5, &mut rng))?;
    store.insert("video.attn.u", Tensor::uniform(&[cfg.d_va], 0.5, &mut rng))?;
    probe(&mut store, "seq", &[cfg.frames, cfg.d_v], &mut rng);
    let mask = vec![true, false, true];
    let weights = Tensor::uniform(&[cfg.d_v], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let seq = g.param(s, "seq")?;
            let (pooled, _) = video::attend_frames(g, s, &cfg, seq, &mask)?;
            probed_loss(g, pooled, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "temporal_attention", report })
}

fn check_projections(seed: u64) -> Result<ModuleCheck> {
    let cfg = RunConfig { use_projections: true, normalize: true, ..tiny_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    joint::init_params(&mut store, &cfg, &mut rng)?;
    probe(&mut store, "x", &[cfg.batch, cfg.d_t], &mut rng);
    let weights = Tensor::uniform(&[cfg.batch, cfg.d_star], 1.0, &mut rng);
    let report = grad_check(
        &store,
        move |g, s| {
            let x = g.param(s, "x")?;
            let out = joint::project_rows(g, s, &cfg, x, Side::Query, true)?;
            probed_loss(g, out, &weights)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "projections", report })
}

fn check_ranking_loss(seed: u64) -> Result<ModuleCheck> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = 4;
    probe(&mut store, "scores", &[b, b], &mut rng);
    let n_hard = cfg.n_hard;
    let margin = cfg.margin;
    let report = grad_check(
        &store,
        move |g, s| {
            let scores = g.param(s, "scores")?;
            g.hinge_rank_loss(scores, margin, n_hard, None)
        },
        &GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(ModuleCheck { name: "ranking_loss", report })
}

/// Runs every module check for one seed.
pub fn module_gradient_suite(seed: u64) -> Result<Vec<ModuleCheck>> {
    Ok(vec![
        check_treelstm(seed)?,
        check_memory_scorer(seed)?,
        check_constituent_attention(seed)?,
        check_gru(seed)?,
        check_multihead_attention(seed)?,
        check_temporal_attention(seed)?,
        check_projections(seed)?,
        check_ranking_loss(seed)?,
    ])
}

/// End-to-end check: full retrieval loss on a two-pair batch with eval-mode
/// (frozen-selection) trees, probing every parameter in the model.
pub fn full_loss_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = RunConfig {
        batch: 2,
        use_projections: true,
        normalize: true,
        d_star: 5,
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vocab_len = 9;
    let frame_dim = 3;
    query::init_params(&mut store, &cfg, vocab_len, &mut rng)?;
    video::init_params(&mut store, &cfg, frame_dim, &mut rng)?;
    joint::init_params(&mut store, &cfg, &mut rng)?;

    let token_sets = [vec![2usize, 5, 7], vec![3usize, 4]];
    let frame_sets = [
        FrameFeatures::new(
            "a".into(),
            Tensor::uniform(&[cfg.frames, frame_dim], 1.0, &mut rng),
            vec![true; cfg.frames],
        )?,
        FrameFeatures::new(
            "b".into(),
            Tensor::uniform(&[cfg.frames, frame_dim], 1.0, &mut rng),
            vec![true, true, false],
        )?,
    ];
    let cfg2 = cfg.clone();
    // the composition is deep, so the widest allowed stencil keeps rounding
    // noise out of the small-gradient coordinates
    grad_check(
        &store,
        move |g, s| {
            let mut q_rows = Vec::new();
            let mut v_rows = Vec::new();
            for i in 0..2 {
                let q = query::encode_query(g, s, &cfg2, &token_sets[i], &mut query::TreeMode::Eval)?;
                q_rows.push(q.embedding);
                v_rows.push(video::encode_video(g, s, &cfg2, &frame_sets[i])?);
            }
            let queries = g.stack_rows(&q_rows)?;
            let videos = g.stack_rows(&v_rows)?;
            let queries = joint::project_rows(g, s, &cfg2, queries, Side::Query, true)?;
            let videos = joint::project_rows(g, s, &cfg2, videos, Side::Video, true)?;
            let sim = joint::similarity_graph(g, queries, videos)?;
            g.hinge_rank_loss(sim, cfg2.margin, 1, None)
        },
        &GradCheckOptions { seed, step: 1e-4, ..Default::default() },
    )
}

//! Encodes a synthetic frame sequence into a video embedding, showing how the
//! temporal attention distributes over real frames and ignores padding.
//!
//!     cargo run --example encode_video

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tce::config::RunConfig;
use tce::graph::Graph;
use tce::joint::{self, Side};
use tce::params::ParamStore;
use tce::tensor::Tensor;
use tce::video::{self, FrameFeatures};

fn main() -> tce::Result<()> {
    let cfg = RunConfig { seed: 4, ..RunConfig::desk() };
    let frame_dim = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    video::init_params(&mut store, &cfg, frame_dim, &mut rng)?;
    joint::init_params(&mut store, &cfg, &mut rng)?;

    // five real frames, padded up to the configured length
    let real = FrameFeatures::new(
        "demo".into(),
        Tensor::uniform(&[5, frame_dim], 1.0, &mut rng),
        vec![true; 5],
    )?;
    let fitted = real.fit_to(cfg.frames)?;
    println!("frames: {} real, fitted to {} with mask {:?}", real.num_frames(), cfg.frames, fitted.mask);

    let mut graph = Graph::new();
    let seq = video::sequence_encode(&mut graph, &store, &cfg, &fitted)?;
    let seq = video::multihead_self_attention(&mut graph, &store, &cfg, seq, &fitted.mask)?;
    let (pooled, weights) = video::attend_frames(&mut graph, &store, &cfg, seq, &fitted.mask)?;

    if let Some(w) = weights {
        let formatted: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
        println!("temporal attention over frames: [{}]", formatted.join(", "));
        println!("  (padded positions get exactly 0)");
    }
    let embedded = joint::project_vec(&mut graph, &store, &cfg, pooled, Side::Video)?;
    let emb = graph.value(embedded);
    println!("video embedding: {} dims, L2 norm {:.4}", emb.numel(), emb.l2_norm());
    Ok(())
}

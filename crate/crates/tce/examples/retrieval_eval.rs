//! Retrieval evaluation walkthrough: ranks a query against a small video
//! collection, prints the per-query ranks behind R@K/MedR, and writes an
//! embedding dump for offline use.
//!
//!     cargo run --release --example retrieval_eval

use tce::config::RunConfig;
use tce::data::{generate_synthetic, Dataset};
use tce::eval::evaluate;
use tce::joint::dump_embeddings;
use tce::model::TceModel;
use tce::train::train;

fn main() -> tce::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    generate_synthetic(dir.path(), 16, 30, 32, 6, 99)?;
    let dataset = Dataset::load_dir(dir.path())?;

    let cfg = RunConfig {
        d_w: 32,
        d_t: 32,
        d_ta: 16,
        d_v: 32,
        d_va: 16,
        heads: 2,
        head_dim: 8,
        d_star: 32,
        frames: 6,
        batch: 8,
        epochs: 40,
        val_split: false,
        ..Default::default()
    };
    let mut model = TceModel::new(cfg, dataset.vocab.len(), 32)?;
    train(&mut model, &dataset, &mut std::io::sink())?;

    let evaluation = evaluate(&model, &dataset)?;
    println!("metrics: {}", evaluation.result);
    println!("per-query rank of the paired video:");
    for (i, rank) in evaluation.result.ranks.iter().enumerate() {
        let marker = if *rank == 1 { "<- top hit" } else { "" };
        println!("  {:12} query {:28} rank {rank} {marker}", dataset.records[i].video_id, format!("{:?}", dataset.records[i].query));
    }

    let container = dir.path().join("embeddings.tcem");
    let index = dir.path().join("embeddings.tcem.idx");
    let ids: Vec<String> = dataset.records.iter().map(|r| r.video_id.clone()).collect();
    dump_embeddings(&container, &index, &ids, &evaluation.query_embeddings, &evaluation.video_embeddings)?;
    println!("embedding dump written to {}", container.display());
    Ok(())
}

//! Full training run on a small synthetic corpus: generates data, trains the
//! joint embedding with the hard-negative ranking loss, and reports retrieval
//! metrics before and after.
//!
//!     cargo run --release --example train_synthetic

use tce::config::RunConfig;
use tce::data::{generate_synthetic, Dataset};
use tce::eval::evaluate;
use tce::model::TceModel;
use tce::train::train;

fn main() -> tce::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let feature_dim = 64;
    generate_synthetic(dir.path(), 32, 50, feature_dim, 8, 7)?;
    let dataset = Dataset::load_dir(dir.path())?;
    println!("corpus: {} pairs, {} videos", dataset.num_pairs(), dataset.num_videos());

    let cfg = RunConfig { epochs: 60, val_split: false, ..RunConfig::desk() };
    let mut model = TceModel::new(cfg, dataset.vocab.len(), feature_dim)?;

    let before = evaluate(&model, &dataset)?.result;
    println!("untrained: {before}");

    let report = train(&mut model, &dataset, &mut std::io::sink())?;
    println!(
        "trained {} batches over {} epochs (best epoch {:?}, early stop: {})",
        report.batch_log.len(),
        report.epoch_val.len(),
        report.best_epoch,
        report.stopped_early
    );
    if let (Some(first), Some(last)) = (report.batch_log.first(), report.batch_log.last()) {
        println!("loss: {:.4} -> {:.4}", first.loss, last.loss);
    }

    let after = evaluate(&model, &dataset)?.result;
    println!("trained:   {after}");
    Ok(())
}

//! Training loop: shuffled mini-batches, train-mode encoding, batch-hard
//! ranking loss, ADAM updates, per-epoch validation, and best-checkpoint
//! selection with early stopping.

use crate::data::{validation_indices, Dataset};
use crate::error::{Result, TceError};
use crate::eval::{evaluate_subset, RetrievalResult};
use crate::graph::Graph;
use crate::joint::{self, Side, BN_MOMENTUM};
use crate::model::TceModel;
use crate::params::{AdamConfig, ParamStore};
use crate::query::{self, TreeMode};
use crate::video::{self, FrameFeatures};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub batch_log: Vec<BatchLog>,
    pub epoch_val: Vec<(usize, RetrievalResult)>,
    /// Epoch whose parameters the model carries after training (best
    /// validation R@1, earlier epoch on ties). None when no epochs ran.
    pub best_epoch: Option<usize>,
    pub best_val_r1: f64,
    pub stopped_early: bool,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic derived seed for an independent RNG stream.
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x9e3779b97f4a7c15);
    for &p in parts {
        h = mix(h ^ p.wrapping_mul(0x9e3779b97f4a7c15));
    }
    h
}

struct Batch<'a> {
    tokens: Vec<&'a [usize]>,
    frames: Vec<&'a FrameFeatures>,
    video_ids: Vec<&'a str>,
}

/// One optimizer step over a batch; returns the loss value.
fn train_step(
    model: &mut TceModel,
    batch: &Batch<'_>,
    adam: &AdamConfig,
    sample_seeds: &[u64],
) -> Result<f64> {
    let cfg = &model.config;
    let b = batch.tokens.len();
    let mut g = Graph::new();

    let mut query_rows = Vec::with_capacity(b);
    let mut video_rows = Vec::with_capacity(b);
    for (i, &seed) in sample_seeds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoded = query::encode_query(
            &mut g,
            &model.store,
            cfg,
            batch.tokens[i],
            &mut TreeMode::Train { rng: &mut rng },
        )?;
        query_rows.push(encoded.embedding);
        video_rows.push(video::encode_video(&mut g, &model.store, cfg, batch.frames[i])?);
    }
    let queries = g.stack_rows(&query_rows)?;
    let videos = g.stack_rows(&video_rows)?;
    let queries = joint::project_rows(&mut g, &model.store, cfg, queries, Side::Query, true)?;
    let videos = joint::project_rows(&mut g, &model.store, cfg, videos, Side::Video, true)?;
    let similarity = joint::similarity_graph(&mut g, queries, videos)?;

    let eligible = if cfg.exclude_duplicate_positives {
        let mut mask = vec![true; b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j && batch.video_ids[i] == batch.video_ids[j] {
                    mask[i * b + j] = false;
                }
            }
        }
        Some(mask)
    } else {
        None
    };
    let n_hard = cfg.n_hard.min(b - 1);
    let loss = g.hinge_rank_loss(similarity, cfg.margin, n_hard, eligible)?;
    let loss_value = g.value(loss).item();

    let grads = g.backward(loss)?;
    model.store.adam_step(&grads, adam)?;
    model.store.apply_bn_updates(&g.take_bn_updates(), BN_MOMENTUM)?;
    Ok(loss_value)
}

/// Trains in place. After return the model carries the parameters of the best
/// validation epoch (initialization when `epochs` is zero). Batch losses are
/// streamed to `log` as `epoch,step,loss` CSV lines.
pub fn train(model: &mut TceModel, dataset: &Dataset, log: &mut dyn Write) -> Result<TrainReport> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if dataset.num_pairs() == 0 {
        return Err(TceError::NoRecords);
    }

    // fit every video to the configured frame count once
    let fitted: Vec<FrameFeatures> =
        dataset.videos.iter().map(|f| f.fit_to(cfg.frames)).collect::<Result<_>>()?;

    let val_idx: Vec<usize> = if cfg.val_split { validation_indices(&dataset.records) } else { vec![] };
    let all: Vec<usize> = (0..dataset.num_pairs()).collect();
    let train_idx: Vec<usize> = if val_idx.is_empty() {
        all.clone()
    } else {
        all.iter().copied().filter(|i| !val_idx.contains(i)).collect()
    };
    if train_idx.is_empty() {
        return Err(TceError::Config("no training records after validation split".into()));
    }
    let val_view: &[usize] = if val_idx.is_empty() { &all } else { &val_idx };

    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut report = TrainReport {
        batch_log: Vec::new(),
        epoch_val: Vec::new(),
        best_epoch: None,
        best_val_r1: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        let mut step = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue; // a trailing singleton has no negatives
            }
            let batch = Batch {
                tokens: chunk.iter().map(|&i| dataset.tokens[i].as_slice()).collect(),
                frames: chunk.iter().map(|&i| &fitted[dataset.target(i)]).collect(),
                video_ids: chunk.iter().map(|&i| dataset.records[i].video_id.as_str()).collect(),
            };
            let sample_seeds: Vec<u64> = (0..chunk.len())
                .map(|slot| stream_seed(cfg.seed, &[2, epoch as u64, step as u64, slot as u64]))
                .collect();
            let loss = train_step(model, &batch, &adam, &sample_seeds).map_err(|e| match e {
                TceError::NonFinite { op } => TceError::NonFinite {
                    op: format!(
                        "{op} (epoch {epoch}, batch {step}; parameter norms: {})",
                        top_param_norms(&model.store)
                    ),
                },
                other => other,
            })?;
            writeln!(log, "{epoch},{step},{loss}")?;
            report.batch_log.push(BatchLog { epoch, step, loss });
            step += 1;
        }

        let val = evaluate_subset(model, dataset, val_view)?;
        let r1 = val.result.r1;
        report.epoch_val.push((epoch, val.result));
        let improved = best.as_ref().is_none_or(|(b_r1, _, _)| r1 > *b_r1);
        if improved {
            best = Some((r1, epoch, model.store.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some((r1, epoch, store)) = best {
        model.store = store;
        report.best_epoch = Some(epoch);
        report.best_val_r1 = r1;
    }
    Ok(report)
}

fn top_param_norms(store: &ParamStore) -> String {
    let mut norms: Vec<(String, f64)> =
        store.params().map(|(name, t)| (name.clone(), t.l2_norm())).collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    norms
        .iter()
        .take(3)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

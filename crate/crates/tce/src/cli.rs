//! Command-line interface.
//!
//! Subcommands: `synth`, `train`, `eval`, `tree`, `gradcheck`. Exit codes:
//! 0 success, 1 usage error, 2 data/format error, 3 numerical failure.

use crate::checks::{module_gradient_suite, GRAD_TOL};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, Dataset};
use crate::error::{Result, TceError};
use crate::eval::evaluate;
use crate::joint::dump_embeddings;
use crate::model::TceModel;
use crate::query::bracketed;
use crate::train::train;
use crate::vocab::Vocabulary;
use clap::{Parser, Subcommand};
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "tce",
    about = "Tree-augmented cross-modal encoding for text-to-video retrieval",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval corpus (manifest, vocab, frame features)
    Synth {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of query-video pairs
        #[arg(long)]
        pairs: usize,
        /// Vocabulary size
        #[arg(long, default_value_t = 50)]
        vocab_size: usize,
        /// Frame feature dimension
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Frames per video
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a data directory and write the best checkpoint
    Train {
        /// Data directory (manifest.jsonl, vocab.txt, features/)
        #[arg(long)]
        data: PathBuf,
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long, default_value = "model.tcem")]
        out: PathBuf,
        /// Overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-batch `epoch,step,loss` CSV here instead of stdout
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a data directory
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write an embedding dump (container at this path, ids at
        /// the same path with ".idx" appended)
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print the latent semantic tree composed for a query
    Tree {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query: String,
        /// Data directory providing vocab.txt
        #[arg(long)]
        data: Option<PathBuf>,
        /// Explicit vocabulary file (overrides --data)
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic gradients per module against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds checked per module
        #[arg(long, default_value_t = 5)]
        rounds: u64,
    },
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let args = std::iter::once("tce".to_string()).chain(args);
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Synth { out, pairs, vocab_size, dim, frames, seed } => {
            generate_synthetic(&out, pairs, vocab_size, dim, frames, seed)?;
            println!("wrote {pairs} pairs to {}", out.display());
            Ok(0)
        }
        Command::Train { data, config, out, seed, log } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = Dataset::load_dir(&data)?;
            let frame_dim = dataset.videos[0].feature_dim();
            let mut model = TceModel::new(cfg, dataset.vocab.len(), frame_dim)?;
            let report = match log {
                Some(path) => {
                    let mut file = File::create(path)?;
                    train(&mut model, &dataset, &mut file)?
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    let report = train(&mut model, &dataset, &mut lock)?;
                    lock.flush()?;
                    report
                }
            };
            model.save(&out)?;
            if let Some((epoch, result)) = report.epoch_val.last() {
                eprintln!("epoch {epoch}: validation {result}");
            }
            match report.best_epoch {
                Some(e) => eprintln!(
                    "best epoch {e} (validation R@1 {:.1}%), checkpoint {}",
                    report.best_val_r1,
                    out.display()
                ),
                None => eprintln!("no training epochs ran; checkpoint {}", out.display()),
            }
            Ok(0)
        }
        Command::Eval { data, ckpt, config, dump } => {
            let cfg = load_config(&config)?;
            let dataset = Dataset::load_dir(&data)?;
            let model = TceModel::load(cfg, &ckpt)?;
            let evaluation = evaluate(&model, &dataset)?;
            println!(
                "{} queries over {} videos: {}",
                dataset.num_pairs(),
                dataset.num_videos(),
                evaluation.result
            );
            if let Some(path) = dump {
                let ids: Vec<String> =
                    dataset.records.iter().map(|r| r.video_id.clone()).collect();
                let index = PathBuf::from(format!("{}.idx", path.display()));
                dump_embeddings(
                    &path,
                    &index,
                    &ids,
                    &evaluation.query_embeddings,
                    &evaluation.video_embeddings,
                )?;
                println!("embeddings dumped to {}", path.display());
            }
            Ok(0)
        }
        Command::Tree { ckpt, query, data, vocab, config } => {
            let cfg = load_config(&config)?;
            let vocab = match (vocab, data) {
                (Some(path), _) => Vocabulary::load(path)?,
                (None, Some(dir)) => Vocabulary::load(dir.join("vocab.txt"))?,
                (None, None) => {
                    return Err(TceError::Config("tree needs --vocab or --data".into()));
                }
            };
            let model = TceModel::load(cfg, &ckpt)?;
            let tokens = Vocabulary::tokenize(&query);
            let ids = vocab.encode(&query)?;
            let (_, tree) = model.embed_query(&ids)?;
            println!("{}", bracketed(&tree, &tokens));
            Ok(0)
        }
        Command::Gradcheck { seed, rounds } => {
            let mut all_pass = true;
            let mut worst: Vec<(&'static str, f64)> = Vec::new();
            for round in 0..rounds.max(1) {
                for check in module_gradient_suite(seed + round)? {
                    match worst.iter_mut().find(|(name, _)| *name == check.name) {
                        Some(entry) => entry.1 = entry.1.max(check.report.max_rel_err),
                        None => worst.push((check.name, check.report.max_rel_err)),
                    }
                    all_pass &= check.passed();
                }
            }
            for (name, err) in &worst {
                let status = if *err < GRAD_TOL { "ok" } else { "FAIL" };
                println!("{name:24} max rel err {err:.3e}  {status}");
            }
            Ok(if all_pass { 0 } else { 3 })
        }
    }
}

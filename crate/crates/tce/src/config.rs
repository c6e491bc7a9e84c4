//! Run configuration: hyperparameters, ablation toggles, and `key=value`
//! config-file parsing. Unknown keys are rejected so typos fail loudly.

use crate::error::{Result, TceError};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// How tree-merge candidates are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Memory-augmented scoring: each candidate queries the leaf-state memory
    /// for a context vector before the scoring MLP.
    MemoryCtx,
    /// Scaled inner product with a learned global query vector (the no-context
    /// ablation).
    GlobalQuery,
}

/// Leaf transformation producing the bottom tree layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafMode {
    Lstm,
    /// Affine map from word embedding straight to a (hidden, cell) pair.
    Affine,
}

/// Pooling over constituent nodes for the query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryPool {
    Attn,
    Avg,
    Last,
}

/// Sequence model over frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoSeq {
    Gru,
    Affine,
}

/// Pooling over frame representations for the video embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoPool {
    Attn,
    Avg,
    Max,
    Last,
}

macro_rules! impl_enum_str {
    ($ty:ty, $($name:literal => $variant:path),+) => {
        impl FromStr for $ty {
            type Err = TceError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(TceError::Config(format!(
                        concat!("invalid ", stringify!($ty), " value {:?} (expected one of: ",
                                $($name, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $($variant => $name,)+
                };
                f.write_str(s)
            }
        }
    };
}

impl_enum_str!(ScoreMode, "memory_ctx" => ScoreMode::MemoryCtx, "global_query" => ScoreMode::GlobalQuery);
impl_enum_str!(LeafMode, "lstm" => LeafMode::Lstm, "affine" => LeafMode::Affine);
impl_enum_str!(QueryPool, "attn" => QueryPool::Attn, "avg" => QueryPool::Avg, "last" => QueryPool::Last);
impl_enum_str!(VideoSeq, "gru" => VideoSeq::Gru, "affine" => VideoSeq::Affine);
impl_enum_str!(VideoPool, "attn" => VideoPool::Attn, "avg" => VideoPool::Avg, "max" => VideoPool::Max, "last" => VideoPool::Last);

/// All hyperparameters for one run. Field names are exactly the keys accepted
/// in a config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Word embedding dimension.
    pub d_w: usize,
    /// Query-side hidden size (leaf states, tree nodes, query embedding).
    pub d_t: usize,
    /// Hidden size of the constituent attention network.
    pub d_ta: usize,
    /// Video-side hidden size.
    pub d_v: usize,
    /// Hidden size of the temporal attention network.
    pub d_va: usize,
    /// Number of self-attention heads.
    pub heads: usize,
    /// Dimension of each head subspace.
    pub head_dim: usize,
    /// Joint embedding dimension.
    pub d_star: usize,
    /// Frames per video after subsampling/padding.
    pub frames: usize,
    /// Ranking-loss margin, in (0, 1).
    pub margin: f64,
    /// Hard negatives per query (clamped to batch - 1).
    pub n_hard: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Gumbel softening temperature.
    pub temperature: f64,
    pub seed: u64,
    /// Epochs without validation R@1 improvement before stopping.
    pub patience: usize,
    pub score_mode: ScoreMode,
    pub leaf_mode: LeafMode,
    pub query_pool: QueryPool,
    /// Include leaves alongside constituents in the query attention pool.
    pub include_leaves: bool,
    pub video_seq: VideoSeq,
    pub use_mha: bool,
    pub video_pool: VideoPool,
    /// Apply the linear projections into the joint space. When off, encoder
    /// outputs are used directly and d_t = d_v = d_star is required.
    pub use_projections: bool,
    /// Batch-normalize + tanh the joint embeddings.
    pub normalize: bool,
    /// Keep in-batch entries sharing the positive's video id out of the
    /// negative set.
    pub exclude_duplicate_positives: bool,
    /// Hold out ~10% of pairs (by stable hash of video id) for validation.
    pub val_split: bool,
    /// Optional checkpoint whose "embedding" tensor warm-starts the word
    /// embedding matrix.
    pub embedding_init: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_w: 500,
            d_t: 512,
            d_ta: 256,
            d_v: 512,
            d_va: 256,
            heads: 8,
            head_dim: 64,
            d_star: 512,
            frames: 16,
            margin: 0.2,
            n_hard: 5,
            lr: 0.0005,
            batch: 128,
            epochs: 50,
            temperature: 1.0,
            seed: 0,
            patience: 20,
            score_mode: ScoreMode::MemoryCtx,
            leaf_mode: LeafMode::Lstm,
            query_pool: QueryPool::Attn,
            include_leaves: false,
            video_seq: VideoSeq::Gru,
            use_mha: true,
            video_pool: VideoPool::Attn,
            use_projections: false,
            normalize: true,
            exclude_duplicate_positives: false,
            val_split: true,
            embedding_init: None,
        }
    }
}

impl RunConfig {
    /// A small configuration for quick experiments: the default model scaled
    /// down to 64-dimensional embeddings and 8 frames.
    pub fn desk() -> Self {
        RunConfig {
            d_w: 64,
            d_t: 64,
            d_ta: 32,
            d_v: 64,
            d_va: 32,
            heads: 4,
            head_dim: 16,
            d_star: 64,
            frames: 8,
            batch: 16,
            epochs: 200,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_w", self.d_w),
            ("d_t", self.d_t),
            ("d_ta", self.d_ta),
            ("d_v", self.d_v),
            ("d_va", self.d_va),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("d_star", self.d_star),
            ("frames", self.frames),
            ("n_hard", self.n_hard),
            ("patience", self.patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TceError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(TceError::Config(format!("margin must be in (0, 1), got {}", self.margin)));
        }
        if self.lr <= 0.0 {
            return Err(TceError::Config("lr must be positive".into()));
        }
        if self.batch < 2 {
            return Err(TceError::Config("batch must be >= 2".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TceError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.use_projections && !(self.d_t == self.d_v && self.d_v == self.d_star) {
            return Err(TceError::Config(
                "without projections, d_t, d_v and d_star must be equal".into(),
            ));
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TceError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| TceError::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "d_w" => self.d_w = num(key, value)?,
            "d_t" => self.d_t = num(key, value)?,
            "d_ta" => self.d_ta = num(key, value)?,
            "d_v" => self.d_v = num(key, value)?,
            "d_va" => self.d_va = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "head_dim" => self.head_dim = num(key, value)?,
            "d_star" => self.d_star = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "n_hard" => self.n_hard = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "score_mode" => self.score_mode = value.parse()?,
            "leaf_mode" => self.leaf_mode = value.parse()?,
            "query_pool" => self.query_pool = value.parse()?,
            "include_leaves" => self.include_leaves = num(key, value)?,
            "video_seq" => self.video_seq = value.parse()?,
            "use_mha" => self.use_mha = num(key, value)?,
            "video_pool" => self.video_pool = value.parse()?,
            "use_projections" => self.use_projections = num(key, value)?,
            "normalize" => self.normalize = num(key, value)?,
            "exclude_duplicate_positives" => self.exclude_duplicate_positives = num(key, value)?,
            "val_split" => self.val_split = num(key, value)?,
            "embedding_init" => self.embedding_init = Some(value.to_string()),
            other => return Err(TceError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_reference_sizes() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.d_w, 500);
        assert_eq!(cfg.d_t, 512);
        assert_eq!(cfg.d_v, 512);
        assert_eq!(cfg.d_ta, 256);
        assert_eq!(cfg.d_va, 256);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.head_dim, 64);
        assert_eq!(cfg.d_star, 512);
        assert_eq!(cfg.n_hard, 5);
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.batch, 128);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("d_t=64\nbogus=1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn parse_overrides_defaults() {
        let cfg = RunConfig::parse(
            "d_w=8\nd_t=16\nd_v=16\nd_star=16\nquery_pool=avg\nscore_mode=global_query\nmargin=0.3\n",
        )
        .unwrap();
        assert_eq!(cfg.d_t, 16);
        assert_eq!(cfg.query_pool, QueryPool::Avg);
        assert_eq!(cfg.score_mode, ScoreMode::GlobalQuery);
        assert_eq!(cfg.margin, 0.3);
    }

    #[test]
    fn projectionless_dims_must_agree() {
        assert!(RunConfig::parse("d_t=32\n").is_err());
        let cfg = RunConfig::parse("d_t=32\nuse_projections=true\n").unwrap();
        assert!(cfg.use_projections);
    }

    #[test]
    fn margin_bounds_enforced() {
        assert!(RunConfig::parse("margin=0\n").is_err());
        assert!(RunConfig::parse("margin=1\n").is_err());
    }
}

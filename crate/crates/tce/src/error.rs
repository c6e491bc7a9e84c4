use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI reports them: data/format problems
/// exit with code 2, numerical failures with code 3.
#[derive(Debug, Error)]
pub enum TceError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: String },

    #[error("zero-norm vector: cannot normalize a degenerate embedding")]
    ZeroNorm,

    #[error("empty query")]
    EmptyQuery,

    #[error("no negatives in batch")]
    NoNegatives,

    #[error("all frames masked: at least one real frame is required")]
    AllMasked,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("no records in manifest")]
    NoRecords,

    #[error("{file}: {msg}")]
    Format { file: PathBuf, msg: String },

    #[error("missing feature files for video ids: {}", ids.join(", "))]
    MissingFeatures { ids: Vec<String> },

    #[error("unknown parameter {0} in checkpoint or store")]
    UnknownParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TceError {
    /// CLI exit code for this error: 2 for data/format problems, 3 for
    /// numerical failures. Usage errors (exit 1) are handled by the parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            TceError::NonFinite { .. } | TceError::ZeroNorm => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, TceError>;

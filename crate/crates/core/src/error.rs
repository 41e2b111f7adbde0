use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SorexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SorexError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("graph is empty after filtering (min_interactions = {min_interactions})")]
    EmptyGraph { min_interactions: usize },

    #[error("invalid split ratios {0:?}: must be non-negative, train positive, and sum to 1")]
    InvalidRatios((f64, f64, f64)),

    #[error("user {user} has interacted with every item; no negatives available")]
    NoNegatives { user: usize },

    #[error("user {user} has no neighbors on the joint graph; cannot sample walks")]
    IsolatedSource { user: usize },

    #[error("walk enumeration exceeded cap of {cap} walks")]
    EnumerationCap { cap: usize },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("config digest mismatch: checkpoint {expected}, current config {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty result set")]
    EmptyResults,

    #[error("autodiff: {0}")]
    Tape(String),
}

impl SorexError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SorexError::Io { path: path.into(), source }
    }
}

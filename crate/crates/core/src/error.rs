use std::path::PathBuf;

use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants map onto process exit codes via [`KvLockError::exit_code`].
#[derive(Debug, Error)]
pub enum KvLockError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular operation: {0}")]
    Singularity(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible artifact: {0}")]
    Compatibility(String),
    #[error("corrupt file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("undefined region: {0}")]
    UndefinedRegion(String),
    #[error("training diverged (seed {seed}) at step {step}: {reason}")]
    Training { seed: u64, step: usize, reason: String },
    #[error("{what} not found: {path}")]
    NotFound { what: &'static str, path: PathBuf },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl KvLockError {
    /// 2 usage/config, 3 data integrity, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            KvLockError::Config(_)
            | KvLockError::NotFound { .. }
            | KvLockError::Io { .. }
            | KvLockError::Csv(_) => 2,
            KvLockError::Shape(_)
            | KvLockError::Index(_)
            | KvLockError::Integrity(_)
            | KvLockError::Compatibility(_)
            | KvLockError::Corruption { .. }
            | KvLockError::UndefinedRegion(_) => 3,
            KvLockError::Singularity(_)
            | KvLockError::Numeric(_)
            | KvLockError::Training { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KvLockError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        KvLockError::Corruption {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = KvLockError> = std::result::Result<T, E>;

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DnaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("batch does not match the model task: {0}")]
    TaskMismatch(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("loss became non-finite at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
    #[error("objective became non-finite at dream step {step}: {value}")]
    DreamDiverged { step: usize, value: f64 },
    #[error("{0}")]
    Analytics(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checksum mismatch in {path}: manifest says {expected}, blob hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DnaError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DnaError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DnaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DnaError> = std::result::Result<T, E>;

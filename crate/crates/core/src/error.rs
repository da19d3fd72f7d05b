use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure category, used by the runner to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum MbjError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dataset not found: {name} (tried {tried:?})")]
    DatasetMissing { name: String, tried: Vec<PathBuf> },

    #[error("insufficient samples for class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: batch={loss_batch}, memory={loss_memory}")]
    Divergence {
        epoch: usize,
        iteration: u64,
        loss_batch: f64,
        loss_memory: f64,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl MbjError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            MbjError::Config(_) => ErrorCategory::Config,
            MbjError::Data(_)
            | MbjError::DatasetMissing { .. }
            | MbjError::InsufficientSamples { .. }
            | MbjError::LabelOutOfRange { .. }
            | MbjError::Shape { .. }
            | MbjError::Format { .. } => ErrorCategory::Data,
            MbjError::Divergence { .. } | MbjError::Numeric(_) => ErrorCategory::Numeric,
            MbjError::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MbjError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = MbjError> = std::result::Result<T, E>;

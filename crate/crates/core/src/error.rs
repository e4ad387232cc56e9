use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("label {label} outside the valid range 0..{classes}")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("non-finite loss at step {step} (lr {lr:e}): {detail}")]
    NonFiniteLoss { step: usize, lr: f64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: checkpoint {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

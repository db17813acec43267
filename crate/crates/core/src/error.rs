use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("unknown token `{0}`")]
    Vocabulary(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("failed to write dataset at {path}: {source}")]
    DatasetWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read dataset file {path}: {reason}")]
    DatasetRead { path: PathBuf, reason: String },

    #[error("corrupted file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidShape(msg.into()))
}

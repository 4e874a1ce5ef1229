use std::path::PathBuf;

/// Errors raised anywhere in the augmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error in {path} at line {line}: {message}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty window stream: {0}")]
    EmptyStream(String),

    #[error("batch too small for PCA: got {got} samples, need at least 2")]
    BatchTooSmall { got: usize },

    #[error("registry error: {0}")]
    Registry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("trajectory diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("external process error: {0}")]
    External(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

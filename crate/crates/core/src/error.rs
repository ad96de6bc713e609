use thiserror::Error;

use detr_tensor::TensorError;

#[derive(Debug, Error)]
pub enum DetrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{0}")]
    Size(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DetrError {
    /// Short machine-readable category used by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            DetrError::Tensor(_) => "tensor",
            DetrError::Config(_) => "config",
            DetrError::Parse { .. } => "parse",
            DetrError::Size(_) => "size",
            DetrError::Numeric(_) => "numeric",
            DetrError::Dataset(_) => "dataset",
            DetrError::Checkpoint(_) => "checkpoint",
            DetrError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, DetrError>;

pub(crate) fn config_err(msg: impl Into<String>) -> DetrError {
    DetrError::Config(msg.into())
}

use std::path::PathBuf;

use dsaf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{path}:{line}: {msg}")]
    Annotation { path: PathBuf, line: usize, msg: String },
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter {0} received no gradient")]
    DeadParameter(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (sample ids {ids:?})")]
    NonFinite { epoch: usize, step: usize, ids: Vec<usize> },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = DetError> = std::result::Result<T, E>;

pub(crate) fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> DetError {
    let context = context.to_string();
    move |source| DetError::Io { context, source }
}

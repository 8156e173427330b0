use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("config error in {op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("autodiff error: {0}")]
    Autodiff(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        msg: msg.into(),
    })
}

pub(crate) fn config_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Config {
        op,
        msg: msg.into(),
    })
}

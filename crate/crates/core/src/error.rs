use thiserror::Error;
use triplane_tensor::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown parameter '{0}'")]
    MissingParam(String),

    #[error("{0}: dimension mismatch: {1}")]
    Dimension(&'static str, String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}

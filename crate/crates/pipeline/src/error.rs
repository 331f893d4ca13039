use std::path::PathBuf;

use thiserror::Error;
use triplane_core::CoreError;
use triplane_tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact: {what} at {}", path.display())]
    MissingArtifact { what: &'static str, path: PathBuf },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{0}")]
    Core(CoreError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl From<CoreError> for PipelineError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(m) => PipelineError::Numerical(m),
            e => PipelineError::Core(e),
        }
    }
}

impl PipelineError {
    /// Process exit status: 1 usage, 2 missing artifact, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingArtifact { .. } => 2,
            PipelineError::Numerical(_)
            | PipelineError::Tensor(TensorError::NonFinite { .. })
            | PipelineError::Core(CoreError::Tensor(TensorError::NonFinite { .. })) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| PipelineError::Io { context, source }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Errors with [`PipelineError::MissingArtifact`] unless `path` exists.
pub fn require(path: impl Into<PathBuf>, what: &'static str) -> Result<PathBuf> {
    let path = path.into();
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { what, path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(require("/nonexistent/ae.ckpt", "autoencoder checkpoint").unwrap_err().exit_code(), 2);
        assert_eq!(PipelineError::from(CoreError::NonFinite("loss".into())).exit_code(), 3);
        assert_eq!(PipelineError::Usage("x".into()).exit_code(), 1);
        let nan = || TensorError::NonFinite { op: "matmul" };
        assert_eq!(PipelineError::from(CoreError::Tensor(nan())).exit_code(), 3);
        assert_eq!(PipelineError::from(nan()).exit_code(), 3);
    }

    #[test]
    fn missing_artifact_message_names_the_artifact() {
        let e = require("/nonexistent/prior.ckpt", "prior checkpoint").unwrap_err();
        assert!(e.to_string().contains("prior checkpoint"));
    }
}

//! Error types shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value at {context} index {index:?}")]
    NonFinite { context: String, index: Vec<usize> },

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }

    /// Process exit code for the CLI: missing pipeline artifacts map to 2,
    /// everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            _ => 1,
        }
    }
}

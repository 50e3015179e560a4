//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shapes do not conform for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Two inputs that must share a timeline do not.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Sequence-valued input was empty where at least one step is required.
    #[error("empty sequence: {0}")]
    EmptySequence(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training loss exceeded the divergence bound.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Stored artifact (tensor file, manifest, checkpoint) failed validation.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn dim(msg: impl Into<String>) -> Self {
        CoreError::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}

//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VitqError {
    /// Invalid model/quantizer configuration or argument combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape inconsistent with the model configuration.
    #[error("shape mismatch for `{tensor}`: expected {expected:?}, got {actual:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Checkpoint or batch manifest could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Operation invoked in an invalid state (e.g. finalize on an empty buffer).
    #[error("state error: {0}")]
    State(String),

    /// A numeric quantity diverged or left its domain.
    #[error("numerical error in {component}: {detail}")]
    Numerical { component: String, detail: String },

    /// Caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for VitqError {
    fn from(e: serde_json::Error) -> Self {
        VitqError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VitqError>;

//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by any nndiff operation.
#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor did not have the shape an operation required.
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// A network failed validation (incompatible layers, missing or
    /// misshapen parameters, softmax in a non-final position, ...).
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    /// A scalar selector referenced a class or neuron that does not exist.
    #[error("invalid selector: {0}")]
    InvalidSelector(String),

    /// A configuration value was missing, unparsable, or out of range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A data or model file was structurally broken (wrong magic, bad
    /// checksum, truncated payload, version mismatch, missing array, ...).
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

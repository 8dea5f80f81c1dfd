//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an API precondition (bad index, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Input data or configuration is invalid.
    #[error("validation error: {0}")]
    Validation(String),

    /// A text file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A forward pass or loss produced NaN/Inf.
    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn non_finite(component: impl Into<String>) -> Self {
        Error::NonFinite {
            component: component.into(),
        }
    }
}

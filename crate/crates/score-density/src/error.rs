//! Error types shared across the crate.
//!
//! Every fallible operation returns [`Result`]. Validation problems
//! (bad dimensions, out-of-range times, malformed parameters) are
//! reported eagerly, before any numerical work starts; numerical
//! problems (non-finite intermediates, failed bisections) carry enough
//! context to locate the offending computation.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector had the wrong length for the model it was used with.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A scalar argument fell outside its admissible interval.
    #[error("{name} = {value} out of range, expected {expected}")]
    Range {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    /// Model or schedule parameters failed validation.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value in {context}")]
    Numeric { context: String },

    /// An iterative solver exhausted its budget without converging.
    #[error("failed to converge: {0}")]
    Convergence(String),
}

impl Error {
    /// Shorthand used by validation code throughout the crate.
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Shorthand for non-finite detections; `context` should say where
    /// and, when relevant, at which draw or step the value appeared.
    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }
}

/// Convenience alias used by every module in this crate.
pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Tensor operands do not have compatible shapes for the named op.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor with more than one element.
    #[error("backward root must be a scalar, got {elements} elements")]
    NonScalarRoot { elements: usize },
    /// Invalid configuration (dimensions, rates, hyperparameters).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),
    /// API misuse: a precondition the caller is responsible for was violated.
    #[error("usage error: {0}")]
    Usage(String),
    /// A metric is undefined on the given inputs.
    #[error("metric error: {0}")]
    Metric(String),
    /// Training produced a non-finite loss or gradient.
    #[error("diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl CoreError {
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CoreError::Usage(msg.into())
    }

    pub fn metric(msg: impl Into<String>) -> Self {
        CoreError::Metric(msg.into())
    }
}

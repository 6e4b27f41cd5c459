use thiserror::Error;

use crate::schemes::SchemeKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A state vector left the open chamber: `x[index] >= x[index + 1]`.
    #[error("state not strictly increasing at index {index}")]
    DomainViolation { index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("implicit solve did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("path aborted at step {step}: {reason}")]
    PathAborted { step: usize, reason: Box<Error> },

    #[error("cannot coarsen a level-0 increment grid")]
    CoarsenLevelZero,

    #[error("degenerate rate fit: {usable} usable mse point(s), need at least 2")]
    DegenerateFit { usable: usize },

    #[error("{scheme} discarded {discarded} of {paths} paths at k = {k}, above the 10% budget")]
    DiscardBudgetExceeded {
        scheme: SchemeKind,
        k: u32,
        discarded: usize,
        paths: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("{key}: {reason}")]
    Config { key: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

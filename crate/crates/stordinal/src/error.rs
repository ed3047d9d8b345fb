//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A numerical operation (factorization, quadrature, ...) failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// An iterative routine exhausted its budget without meeting its
    /// convergence criterion.
    #[error("no convergence after {iterations} iterations ({context}, criterion {criterion:.3e})")]
    NoConvergence {
        iterations: usize,
        criterion: f64,
        context: String,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

//! Sequential ordinal models with separable Matern x AR(1) latent Gaussian
//! fields, fitted by a Laplace approximation nested in a hyperparameter
//! grid integration.

pub mod design;
pub mod error;
pub mod inference;
pub mod math;
pub mod ordinal;
pub mod simulate;
pub mod spacetime;

pub use error::{Error, Result};

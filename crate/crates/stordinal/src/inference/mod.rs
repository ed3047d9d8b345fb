//! Approximate Bayesian inference for the expanded binary model.
//!
//! The posterior is handled in two tiers.  Conditional on hyperparameters,
//! the joint of coefficients and latent field is replaced by its Laplace
//! approximation around the posterior mode.  The hyperparameters themselves
//! are explored on a small grid centred at the maximiser of the approximate
//! marginal posterior, with normalised weights standing in for the
//! hyperparameter posterior.  Posterior draws mix over the grid, and feed
//! model comparison and prediction.

pub mod dic;
pub mod fit;
pub mod laplace;
pub mod neldermead;
pub mod objective;
pub mod predict;
pub mod sample;

pub use dic::{deviance, dic, dic_from_draws, DicSummary};
pub use fit::{fit, FitConfig, FitResult, HyperGridPoint, ParamSummary};
pub use laplace::{find_mode, log_laplace_marginal, GaussianApprox, DEFAULT_MAX_NEWTON};
pub use neldermead::{nelder_mead, NelderMeadResult};
pub use objective::{neg_log_joint, FixedCoefJoint, Hyperparameters, JointModel, Objective};
pub use predict::{predict, PredictionRow, PredictionSet, PredictionTarget};
pub use sample::{sample_posterior, PosteriorDraw};

//! Deviance information criterion with the joint `[coefficients; latent]`
//! focus.
//!
//! The deviance of a parameter vector is minus twice the exact binary
//! log-likelihood of the expanded design.  `DIC = mean deviance + p_D` with
//! `p_D = mean deviance - deviance at the posterior mean`; the posterior
//! mean is the weight-averaged grid mode, so a degenerate single-point
//! posterior yields `p_D = 0` exactly.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::ExpandedDesign;
use crate::error::{Error, Result};

use super::fit::FitResult;
use super::sample::sample_posterior;

/// DIC and its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    pub dic: f64,
    /// Effective number of parameters.
    pub p_d: f64,
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean of `[coefficients; latent values]`.
    pub fitted_deviance: f64,
}

/// Minus twice the binary log-likelihood at `theta = [coefficients; latent]`.
pub fn deviance(design: &ExpandedDesign, theta: &DVector<f64>) -> Result<f64> {
    let p = design.n_coef();
    let m = design.latent_dim();
    if theta.len() != p + m {
        return Err(Error::dimension(format!(
            "deviance expects {} parameters, got {}",
            p + m,
            theta.len()
        )));
    }
    let slice = theta.as_slice();
    let etas = design.linear_predictor(&slice[..p], &slice[p..])?;
    let link = design.spec().link;
    let loglik: f64 = design
        .y()
        .iter()
        .zip(&etas)
        .map(|(&y, &eta)| link.bernoulli_loglik(y, eta))
        .sum();
    Ok(-2.0 * loglik)
}

/// DIC from explicit posterior draws and an explicit posterior mean.
pub fn dic_from_draws(
    design: &ExpandedDesign,
    draws: &[DVector<f64>],
    theta_bar: &DVector<f64>,
) -> Result<DicSummary> {
    if draws.is_empty() {
        return Err(Error::invalid("DIC needs at least one posterior draw"));
    }
    let mut mean_deviance = 0.0;
    for draw in draws {
        mean_deviance += deviance(design, draw)?;
    }
    mean_deviance /= draws.len() as f64;
    let fitted_deviance = deviance(design, theta_bar)?;
    let p_d = mean_deviance - fitted_deviance;
    Ok(DicSummary {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
        fitted_deviance,
    })
}

/// DIC of a fit, using `n` fresh posterior draws under `seed` and the fit's
/// mixture posterior mean.
pub fn dic(fit: &FitResult, design: &ExpandedDesign, n: usize, seed: u64) -> Result<DicSummary> {
    let draws = sample_posterior(fit, n, seed)?;
    let thetas: Vec<DVector<f64>> = draws.into_iter().map(|d| d.theta).collect();
    dic_from_draws(design, &thetas, &fit.posterior_mean())
}

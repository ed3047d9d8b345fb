//! Newton mode search and the Gaussian (Laplace) approximation at the mode.
//!
//! The mode search minimises an [`Objective`] (a negative log density) by
//! damped Newton steps: the Newton direction is computed from the analytic
//! Hessian (with an escalating diagonal jitter if a factorization fails) and
//! the step is halved until the objective decreases.  Convergence is declared
//! when the gradient's infinity norm drops below `1e-8` relative to the
//! objective scale; when rounding stops all further progress, a point within
//! the relaxed `1e-5` criterion is still accepted.  Non-convergence is an
//! error carrying the iteration count and the achieved criterion, never a
//! silently accepted result.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::ExpandedDesign;
use crate::error::{Error, Result};
use crate::math::LN_SQRT_2PI;
use crate::spacetime::jittered_spd;

use super::objective::{Hyperparameters, JointModel, Objective};

/// Relative gradient tolerance of the Newton mode search.
pub const MODE_GRAD_TOL: f64 = 1e-8;

/// Relaxed tolerance accepted when floating-point stagnation (an expected
/// decrease below the objective's rounding noise) halts the search early.
const MODE_GRAD_RELAXED: f64 = 1e-5;

/// Default Newton iteration budget.
pub const DEFAULT_MAX_NEWTON: usize = 100;

/// Armijo sufficient-decrease constant for the damped step.
const ARMIJO_C1: f64 = 1e-4;

/// Gaussian approximation of a density at the minimum of its negative log:
/// `theta ~ N(mode, P^{-1})` with `P = L L'` the Hessian at the mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianApprox {
    /// Argmin of the objective.
    pub mode: DVector<f64>,
    /// Lower Cholesky factor of the precision (Hessian at the mode).
    pub precision_l: DMatrix<f64>,
    /// `ln det P`.
    pub log_det_precision: f64,
    /// Objective value (negative log density) at the mode.
    pub objective_at_mode: f64,
    /// Whether the gradient criterion was met (always true for values
    /// returned by [`find_mode`]; kept so archived results are explicit).
    pub converged: bool,
    /// Newton iterations performed.
    pub iterations: usize,
}

impl GaussianApprox {
    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    /// Marginal variances, the diagonal of `P^{-1}`, via triangular solves
    /// against the Cholesky factor.
    pub fn marginal_variances(&self) -> DVector<f64> {
        self.marginal_variances_prefix(self.dim())
    }

    /// Marginal variances of the first `count` coordinates only (cheaper
    /// when only the coefficient block is summarised).
    pub fn marginal_variances_prefix(&self, count: usize) -> DVector<f64> {
        let n = self.dim();
        assert!(count <= n, "prefix length {count} exceeds dimension {n}");
        let mut out = DVector::zeros(count);
        let mut e = DVector::zeros(n);
        for i in 0..count {
            e.fill(0.0);
            e[i] = 1.0;
            let col = self
                .precision_l
                .solve_lower_triangular(&e)
                .expect("Cholesky factor has positive diagonal");
            out[i] = col.norm_squared();
        }
        out
    }

    /// Marginal standard deviations.
    pub fn marginal_sd(&self) -> DVector<f64> {
        self.marginal_variances().map(f64::sqrt)
    }

    /// Log of the Laplace approximation to the integral of `exp(-objective)`:
    /// `-f(mode) + (d/2) ln 2 pi - (1/2) ln det P`.
    pub fn log_laplace_marginal(&self) -> f64 {
        -self.objective_at_mode + self.dim() as f64 * LN_SQRT_2PI - 0.5 * self.log_det_precision
    }

    /// `mode + L^{-T} z`, mapping a standard normal vector to a draw from
    /// the approximation.
    pub fn transform_standard_normal(&self, z: &DVector<f64>) -> DVector<f64> {
        let step = self
            .precision_l
            .tr_solve_lower_triangular(z)
            .expect("Cholesky factor has positive diagonal");
        &self.mode + step
    }
}

/// Cholesky-factors a symmetric matrix, escalating a diagonal jitter when
/// plain factorization fails.
fn spd_cholesky(h: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = Cholesky::new(h.clone()) {
        return Ok(chol);
    }
    let unit = h.diagonal().amax();
    let (jittered, _) = jittered_spd(h, unit)?;
    Cholesky::new(jittered)
        .ok_or_else(|| Error::numerical("Hessian factorization failed after jitter"))
}

fn approx_from(
    theta: DVector<f64>,
    value: f64,
    hess: &DMatrix<f64>,
    iterations: usize,
) -> Result<GaussianApprox> {
    let chol = spd_cholesky(hess)?;
    let log_det_precision: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(GaussianApprox {
        mode: theta,
        precision_l: chol.l(),
        log_det_precision,
        objective_at_mode: value,
        converged: true,
        iterations,
    })
}

/// Minimises the objective by damped Newton iteration from `init` (zero when
/// absent) and returns the Gaussian approximation at the minimum.
///
/// Errors with [`Error::NoConvergence`] when the budget is exhausted or a
/// step search stalls before the gradient criterion is met.
pub fn find_mode(
    obj: &dyn Objective,
    init: Option<&DVector<f64>>,
    max_iter: usize,
) -> Result<GaussianApprox> {
    let dim = obj.dim();
    let mut theta = match init {
        Some(t) => {
            if t.len() != dim {
                return Err(Error::dimension(format!(
                    "mode search start has dimension {}, objective wants {dim}",
                    t.len()
                )));
            }
            t.clone()
        }
        None => DVector::zeros(dim),
    };
    if dim == 0 {
        return Ok(GaussianApprox {
            mode: theta,
            precision_l: DMatrix::zeros(0, 0),
            log_det_precision: 0.0,
            objective_at_mode: obj.value(&DVector::zeros(0))?,
            converged: true,
            iterations: 0,
        });
    }

    let (mut f, mut g, mut h) = obj.value_grad_hess(&theta)?;
    for it in 0..=max_iter {
        let scale = f.abs().max(1.0);
        let criterion = g.amax() / scale;
        if criterion <= MODE_GRAD_TOL {
            return approx_from(theta, f, &h, it);
        }
        if it == max_iter {
            if criterion <= MODE_GRAD_RELAXED {
                return approx_from(theta, f, &h, it);
            }
            return Err(Error::NoConvergence {
                iterations: it,
                criterion,
                context: "Newton mode search".to_string(),
            });
        }

        let chol = spd_cholesky(&h)?;
        let direction = chol.solve(&(-&g));
        let slope = g.dot(&direction);
        if !slope.is_finite() || slope >= 0.0 {
            return Err(Error::numerical(format!(
                "Newton direction is not a descent direction (slope {slope:e})"
            )));
        }
        let mut t = 1.0;
        loop {
            let candidate = &theta + &direction * t;
            if let Ok(fc) = obj.value(&candidate) {
                if fc <= f + ARMIJO_C1 * t * slope {
                    theta = candidate;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-16 {
                // No representable step decreases the objective: accept the
                // point if the gradient is already small, otherwise fail.
                if criterion <= MODE_GRAD_RELAXED {
                    return approx_from(theta, f, &h, it);
                }
                return Err(Error::NoConvergence {
                    iterations: it,
                    criterion,
                    context: "Newton step search stalled".to_string(),
                });
            }
        }
        (f, g, h) = obj.value_grad_hess(&theta)?;
    }
    unreachable!("loop returns before exhausting the range");
}

/// Log Laplace approximation of the marginal likelihood of the data given
/// the hyperparameters, with coefficients and latent values integrated out.
pub fn log_laplace_marginal(
    design: &ExpandedDesign,
    hyper: Option<&Hyperparameters>,
) -> Result<f64> {
    let model = JointModel::new(design, hyper)?;
    let approx = find_mode(&model, None, DEFAULT_MAX_NEWTON)?;
    Ok(approx.log_laplace_marginal())
}

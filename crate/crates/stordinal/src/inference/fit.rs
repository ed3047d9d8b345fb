//! Full model fit: hyperparameter posterior exploration on a probed grid
//! with a Laplace approximation of coefficients and latent values at every
//! grid point.
//!
//! The hyperparameter posterior (Laplace marginal likelihood times the
//! penalised-complexity priors, on internal coordinates with the Jacobian
//! included) is first maximised by a simplex search.  Per-coordinate grid
//! steps are then probed directly from the objective — separately for each
//! direction, so skewed marginals get asymmetric spans — a full factorial
//! grid is evaluated around the optimum, and the exponentiated
//! log-posterior values become normalised integration weights.  Coefficient
//! summaries integrate over the grid as a Gaussian mixture; hyperparameter
//! summaries interpolate the weighted grid marginals.

use std::cell::RefCell;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{ExpandedDesign, Variant};
use crate::error::{Error, Result};
use crate::math::norm_cdf;
use crate::spacetime::{ARParams, MaternParams};

use super::dic::{dic_from_draws, DicSummary};
use super::laplace::{find_mode, GaussianApprox};
use super::neldermead::nelder_mead;
use super::objective::{Hyperparameters, JointModel};
use super::sample::sample_posterior;

/// Finite-difference step (internal coordinates) for the curvature estimate
/// at the hyperparameter optimum.
const FD_STEP: f64 = 0.05;
/// Bounds on the per-coordinate grid step (internal coordinates).
const MIN_GRID_STEP: f64 = 0.05;
const MAX_GRID_STEP: f64 = 2.0;
/// Edge length of the initial simplex (internal coordinates).
const NM_INITIAL_STEP: f64 = 0.3;
/// Target rise of the negative log posterior at the outermost grid point
/// along each axis.  Grid spans are probed to reach this drop so that the
/// grid covers the marginal down to about `exp(-3)` relative density even
/// when local curvature understates a skewed tail.
const EDGE_LOG_DROP: f64 = 3.0;
/// Objective evaluations allowed per probe direction.
const PROBE_BUDGET: usize = 8;

/// Tuning knobs of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Grid points per internal hyperparameter coordinate (odd).
    pub grid_points_per_dim: usize,
    /// Multiplier on the probed grid step.
    pub grid_step_scale: f64,
    /// Posterior draws used for the DIC.
    pub samples: usize,
    /// Master seed for every randomised stage.
    pub seed: u64,
    /// Newton budget of each inner mode search.
    pub max_newton_iter: usize,
    /// Iteration budget of the hyperparameter simplex search.
    pub max_nm_iter: usize,
    /// Optional starting hyperparameters (a data-driven heuristic otherwise).
    pub init: Option<Hyperparameters>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            grid_points_per_dim: 5,
            grid_step_scale: 1.0,
            samples: 2000,
            seed: 0,
            max_newton_iter: 100,
            max_nm_iter: 400,
            init: None,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.grid_points_per_dim == 0 || self.grid_points_per_dim % 2 == 0 {
            return Err(Error::invalid(
                "grid points per dimension must be odd and positive",
            ));
        }
        if !(self.grid_step_scale > 0.0 && self.grid_step_scale.is_finite()) {
            return Err(Error::invalid("grid step scale must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("need at least one posterior draw"));
        }
        if self.max_newton_iter == 0 || self.max_nm_iter == 0 {
            return Err(Error::invalid("iteration budgets must be positive"));
        }
        Ok(())
    }
}

/// Posterior quantiles of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// One hyperparameter grid point with its normalised posterior weight and
/// the Gaussian approximation of coefficients and latent values given it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperGridPoint {
    /// Grid-point hyperparameters (absent for the parametric variant).
    pub hyper: Option<Hyperparameters>,
    /// Unnormalised hyperparameter log posterior at this point.
    pub log_posterior: f64,
    /// Normalised integration weight.
    pub weight: f64,
    pub approx: GaussianApprox,
}

/// Everything a fit produces: the weighted grid, marginal summaries, the
/// deviance information criterion, and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub variant: Variant,
    /// Hash of the model specification the fit was built from.
    pub spec_hash: String,
    pub coefficient_names: Vec<String>,
    pub grid: Vec<HyperGridPoint>,
    pub coefficient_summary: Vec<ParamSummary>,
    pub hyper_summary: Vec<ParamSummary>,
    pub dic: DicSummary,
    /// Master seed the randomised stages used.
    pub seed: u64,
    /// Posterior draws behind the DIC.
    pub samples: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Posterior mean of `[coefficients; latent values]`: the weighted
    /// average of the grid modes.
    pub fn posterior_mean(&self) -> DVector<f64> {
        let dim = self.grid[0].approx.dim();
        let mut mean = DVector::zeros(dim);
        for point in &self.grid {
            mean += &point.approx.mode * point.weight;
        }
        mean
    }

    pub fn n_coef(&self) -> usize {
        self.coefficient_names.len()
    }
}

/// Unnormalised hyperparameter log posterior: Laplace marginal likelihood
/// plus prior log densities plus the internal-coordinate Jacobian.  Also
/// returns the Gaussian approximation so callers can reuse the mode.
fn hyper_log_posterior(
    design: &ExpandedDesign,
    hyper: &Hyperparameters,
    max_newton_iter: usize,
    init: Option<&DVector<f64>>,
) -> Result<(f64, GaussianApprox)> {
    let model = JointModel::new(design, Some(hyper))?;
    let approx = find_mode(&model, init, max_newton_iter)?;
    let priors = &design.spec().priors;
    let mut lp = approx.log_laplace_marginal()
        + priors.sd.log_density(hyper.matern.sigma)?
        + priors.range.log_density(hyper.matern.range)?
        + hyper.log_jacobian();
    if let Some(ar) = hyper.ar {
        lp += priors.cor.log_density(ar.rho)?;
    }
    Ok((lp, approx))
}

/// Data-driven starting hyperparameters: a standard deviation of twice the
/// prior tail threshold, a range of twice the median nearest-neighbour knot
/// distance, and (when present) a mid-range autocorrelation.
fn default_init(design: &ExpandedDesign, with_ar: bool) -> Hyperparameters {
    let priors = &design.spec().priors;
    let sigma0 = (2.0 * priors.sd.u).max(1e-6);
    let knots = design.knots();
    let k = knots.len();
    let mut nearest: Vec<f64> = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| knots.distance(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    let range0 = if nearest.is_empty() {
        priors.range.u.max(1e-3)
    } else {
        nearest.sort_by(|a, b| a.total_cmp(b));
        (2.0 * nearest[nearest.len() / 2]).max(1e-3)
    };
    let matern = MaternParams::new(sigma0, range0).expect("positive initial hyperparameters");
    if with_ar {
        Hyperparameters::spacetime(matern, ARParams::new(0.5).expect("valid initial rho"))
    } else {
        Hyperparameters::spatial(matern)
    }
}

/// Central finite-difference Hessian of a scalar function.
fn fd_hessian(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let f0 = f(x)?;
    let mut h = DMatrix::zeros(n, n);
    let shifted = |shifts: &[(usize, f64)]| -> Vec<f64> {
        let mut xx = x.to_vec();
        for &(i, d) in shifts {
            xx[i] += d;
        }
        xx
    };
    for i in 0..n {
        let fp = f(&shifted(&[(i, step)]))?;
        let fm = f(&shifted(&[(i, -step)]))?;
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in 0..i {
            let fpp = f(&shifted(&[(i, step), (j, step)]))?;
            let fpm = f(&shifted(&[(i, step), (j, -step)]))?;
            let fmp = f(&shifted(&[(i, -step), (j, step)]))?;
            let fmm = f(&shifted(&[(i, -step), (j, -step)]))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// Per-coordinate grid steps from the curvature at the optimum: the marginal
/// posterior standard deviation of each internal coordinate, scaled and
/// clamped.  `None` when the curvature is not positive definite.
fn curvature_steps(hess: &DMatrix<f64>, scale: f64) -> Option<Vec<f64>> {
    let inv = Cholesky::new(hess.clone())?.inverse();
    Some(
        (0..hess.nrows())
            .map(|i| (inv[(i, i)].max(0.0).sqrt() * scale).clamp(MIN_GRID_STEP, MAX_GRID_STEP))
            .collect(),
    )
}

fn fallback_steps(dim: usize, scale: f64) -> Vec<f64> {
    vec![(0.5 * scale).clamp(MIN_GRID_STEP, MAX_GRID_STEP); dim]
}

/// Per-direction unit grid steps probed from the objective.
///
/// Along each axis and direction the step is sized so the objective rises
/// by roughly `EDGE_LOG_DROP / half²` one step out, which places the grid
/// edge (`half` steps out) near a log-density drop of `EDGE_LOG_DROP` for
/// an approximately quadratic objective.  Probing instead of trusting the
/// curvature at the optimum keeps flat or skewed tails inside the grid;
/// directions whose probes all fail keep the curvature-derived step.
/// Returns `(upward, downward)` steps, both positive and scaled by `scale`.
fn probed_steps(
    objective: &mut dyn FnMut(&[f64]) -> Result<f64>,
    center: &[f64],
    f_center: f64,
    half: i64,
    init: &[f64],
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dim = center.len();
    let unit_target = EDGE_LOG_DROP / (half.max(1) * half.max(1)) as f64;
    let mut plus = vec![0.0; dim];
    let mut minus = vec![0.0; dim];
    for i in 0..dim {
        let mut probe = |dir: f64| -> f64 {
            let mut a = init[i].clamp(MIN_GRID_STEP, MAX_GRID_STEP);
            let mut best: Option<(f64, f64)> = None;
            for _ in 0..PROBE_BUDGET {
                let mut x = center.to_vec();
                x[i] += dir * a;
                let rise = match objective(&x) {
                    Ok(f) if f.is_finite() => f - f_center,
                    _ => f64::INFINITY,
                };
                if rise.is_finite() && rise > 0.0 {
                    best = Some((a, rise));
                    if (0.25 * unit_target..=4.0 * unit_target).contains(&rise) {
                        break;
                    }
                }
                if rise > unit_target {
                    if a <= MIN_GRID_STEP {
                        break;
                    }
                    a = (a * 0.5).max(MIN_GRID_STEP);
                } else {
                    if a >= MAX_GRID_STEP {
                        break;
                    }
                    a = (a * 2.0).min(MAX_GRID_STEP);
                }
            }
            let unit = match best {
                // One quadratic rescale toward the target rise.
                Some((a, rise)) => {
                    (a * (unit_target / rise).sqrt()).clamp(MIN_GRID_STEP, MAX_GRID_STEP)
                }
                None => init[i],
            };
            (unit * scale).clamp(MIN_GRID_STEP, MAX_GRID_STEP)
        };
        plus[i] = probe(1.0);
        minus[i] = probe(-1.0);
    }
    (plus, minus)
}

/// Integer offset tuples of the full factorial grid, last coordinate
/// fastest: `{-h..h}^dim` for `points = 2h + 1`.
fn grid_offsets(dim: usize, points_per_dim: usize) -> Vec<Vec<i64>> {
    let half = (points_per_dim as i64 - 1) / 2;
    let mut out = Vec::with_capacity(points_per_dim.pow(dim as u32));
    let mut current = vec![-half; dim];
    'outer: loop {
        out.push(current.clone());
        let mut i = dim;
        loop {
            if i == 0 {
                break 'outer;
            }
            i -= 1;
            if current[i] < half {
                current[i] += 1;
                for later in current.iter_mut().skip(i + 1) {
                    *later = -half;
                }
                break;
            }
        }
    }
    out
}

/// Boundary diagnostics: warn when the highest-weight point sits on the
/// grid boundary, or when the boundary shell carries most of the weight.
fn boundary_warnings(on_boundary: &[bool], weights: &[f64]) -> Vec<String> {
    let mut warnings = Vec::new();
    if on_boundary.is_empty() || on_boundary.iter().all(|b| !b) {
        return warnings;
    }
    let argmax = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty weights");
    let boundary_mass: f64 = weights
        .iter()
        .zip(on_boundary)
        .filter(|(_, b)| **b)
        .map(|(w, _)| w)
        .sum();
    if on_boundary[argmax] {
        warnings.push(
            "highest-weight hyperparameter grid point sits on the grid boundary; \
             the grid may be too narrow"
                .to_string(),
        );
    } else if boundary_mass > 0.5 {
        warnings.push(format!(
            "the grid boundary carries {:.0}% of the posterior weight; \
             the grid may be too narrow",
            100.0 * boundary_mass
        ));
    }
    warnings
}

/// Explores the hyperparameter posterior for a latent-field variant and
/// returns the weighted grid.
fn build_hyper_grid(
    design: &ExpandedDesign,
    config: &FitConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<HyperGridPoint>> {
    let with_ar = design.spec().variant == Variant::M3;
    let dim = if with_ar { 3 } else { 2 };

    if let Some(init) = &config.init {
        if init.ar.is_some() != with_ar {
            return Err(Error::invalid(
                "initial hyperparameters do not match the model variant",
            ));
        }
    }
    let init_hyper = config.init.unwrap_or_else(|| default_init(design, with_ar));

    // The simplex search and the curvature probe run sequentially and warm
    // start each inner Newton search from the previous mode.
    let warm: RefCell<Option<DVector<f64>>> = RefCell::new(None);
    let mut objective = |phi: &[f64]| -> Result<f64> {
        let hyper = Hyperparameters::from_internal(phi, with_ar)?;
        let warm_init = warm.borrow().clone();
        let (lp, approx) =
            hyper_log_posterior(design, &hyper, config.max_newton_iter, warm_init.as_ref())?;
        *warm.borrow_mut() = Some(approx.mode);
        Ok(-lp)
    };

    let phi0 = init_hyper.internal();
    let nm = nelder_mead(&mut objective, &phi0, NM_INITIAL_STEP, config.max_nm_iter)?;

    let init_steps = match fd_hessian(&mut objective, &nm.x, FD_STEP) {
        Ok(h) => curvature_steps(&h, 1.0).unwrap_or_else(|| {
            warnings.push(
                "hyperparameter curvature is not positive definite; using default grid steps"
                    .to_string(),
            );
            fallback_steps(dim, 1.0)
        }),
        Err(e) => {
            warnings.push(format!(
                "hyperparameter curvature estimate failed ({e}); using default grid steps"
            ));
            fallback_steps(dim, 1.0)
        }
    };
    let half = (config.grid_points_per_dim as i64 - 1) / 2;
    let (steps_up, steps_down) = if half > 0 {
        probed_steps(
            &mut objective,
            &nm.x,
            nm.value,
            half,
            &init_steps,
            config.grid_step_scale,
        )
    } else {
        (init_steps.clone(), init_steps.clone())
    };

    // A fixed warm start shared by all grid points keeps the evaluation of
    // each point independent of scheduling.
    let center_hyper = Hyperparameters::from_internal(&nm.x, with_ar)?;
    let center_init = warm.borrow().clone();
    let (_, center_approx) =
        hyper_log_posterior(design, &center_hyper, config.max_newton_iter, center_init.as_ref())?;
    let center_mode = center_approx.mode;

    let offsets = grid_offsets(dim, config.grid_points_per_dim);
    let evaluated: Vec<(Vec<i64>, Result<(Hyperparameters, f64, GaussianApprox)>)> = offsets
        .into_par_iter()
        .map(|z| {
            let mut phi = nm.x.clone();
            for (i, zi) in z.iter().enumerate() {
                let step = if *zi >= 0 { steps_up[i] } else { steps_down[i] };
                phi[i] += *zi as f64 * step;
            }
            let outcome = Hyperparameters::from_internal(&phi, with_ar).and_then(|hyper| {
                hyper_log_posterior(design, &hyper, config.max_newton_iter, Some(&center_mode))
                    .map(|(lp, approx)| (hyper, lp, approx))
            });
            (z, outcome)
        })
        .collect();

    let mut points = Vec::new();
    let mut on_boundary = Vec::new();
    for (z, outcome) in evaluated {
        match outcome {
            Ok((hyper, log_posterior, approx)) => {
                on_boundary.push(half > 0 && z.iter().any(|v| v.abs() == half));
                points.push(HyperGridPoint {
                    hyper: Some(hyper),
                    log_posterior,
                    weight: 0.0,
                    approx,
                });
            }
            Err(e) => warnings.push(format!("dropped hyperparameter grid point {z:?}: {e}")),
        }
    }
    if points.is_empty() {
        return Err(Error::numerical(
            "every hyperparameter grid point failed its mode search",
        ));
    }

    let lmax = points
        .iter()
        .map(|p| p.log_posterior)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for p in &mut points {
        p.weight = (p.log_posterior - lmax).exp();
        total += p.weight;
    }
    for p in &mut points {
        p.weight /= total;
    }

    let weights: Vec<f64> = points.iter().map(|p| p.weight).collect();
    warnings.extend(boundary_warnings(&on_boundary, &weights));
    Ok(points)
}

/// Quantile of a Gaussian mixture with components `(weight, mean, sd)`, by
/// bisection on the mixture CDF.
fn mixture_quantile(components: &[(f64, f64, f64)], p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(w, mu, sd) in components {
        if w > 0.0 {
            lo = lo.min(mu - 12.0 * sd - 1.0);
            hi = hi.max(mu + 12.0 * sd + 1.0);
        }
    }
    debug_assert!(lo < hi, "mixture has no positive-weight component");
    let cdf = |x: f64| -> f64 {
        components
            .iter()
            .filter(|(w, _, _)| *w > 0.0)
            .map(|&(w, mu, sd)| w * norm_cdf((x - mu) / sd))
            .sum()
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Quantile of a weighted discrete sample with linear interpolation between
/// the midpoints of the cumulative weights.
fn weighted_quantile(values_weights: &[(f64, f64)], p: f64) -> f64 {
    debug_assert!(!values_weights.is_empty());
    // Aggregate duplicates after sorting by value.
    let mut sorted = values_weights.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (v, w) in sorted {
        match merged.last_mut() {
            Some(last) if last.0 == v => last.1 += w,
            _ => merged.push((v, w)),
        }
    }
    let total: f64 = merged.iter().map(|(_, w)| w).sum();
    debug_assert!(total > 0.0);
    // Cumulative midpoints c_i = sum_{j<i} w_j + w_i / 2 (normalised).
    let mut cum = 0.0;
    let mids: Vec<f64> = merged
        .iter()
        .map(|(_, w)| {
            let c = (cum + 0.5 * w) / total;
            cum += w;
            c
        })
        .collect();
    if p <= mids[0] {
        return merged[0].0;
    }
    if p >= mids[mids.len() - 1] {
        return merged[merged.len() - 1].0;
    }
    let idx = mids.partition_point(|c| *c < p);
    let (c0, v0) = (mids[idx - 1], merged[idx - 1].0);
    let (c1, v1) = (mids[idx], merged[idx].0);
    v0 + (p - c0) / (c1 - c0) * (v1 - v0)
}

const SUMMARY_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

fn summarize_coefficients(design: &ExpandedDesign, grid: &[HyperGridPoint]) -> Vec<ParamSummary> {
    let p = design.n_coef();
    let sds: Vec<DVector<f64>> = grid
        .iter()
        .map(|g| g.approx.marginal_variances_prefix(p).map(f64::sqrt))
        .collect();
    design
        .coefficient_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let components: Vec<(f64, f64, f64)> = grid
                .iter()
                .zip(&sds)
                .map(|(g, sd)| (g.weight, g.approx.mode[j], sd[j]))
                .collect();
            let q: Vec<f64> = SUMMARY_PROBS
                .iter()
                .map(|&prob| mixture_quantile(&components, prob))
                .collect();
            ParamSummary {
                name,
                q025: q[0],
                q50: q[1],
                q975: q[2],
            }
        })
        .collect()
}

fn summarize_hypers(grid: &[HyperGridPoint]) -> Vec<ParamSummary> {
    if grid.iter().any(|g| g.hyper.is_none()) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let extractors: [(&str, fn(&Hyperparameters) -> Option<f64>); 3] = [
        ("r", |h| Some(h.matern.range)),
        ("σ", |h| Some(h.matern.sigma)),
        ("ρ", |h| h.ar.map(|a| a.rho)),
    ];
    for (name, extract) in extractors {
        let pairs: Vec<(f64, f64)> = grid
            .iter()
            .filter_map(|g| extract(g.hyper.as_ref().expect("checked above")).map(|v| (v, g.weight)))
            .collect();
        if pairs.len() != grid.len() {
            continue; // coordinate absent for this variant (rho without AR)
        }
        let q: Vec<f64> = SUMMARY_PROBS
            .iter()
            .map(|&prob| weighted_quantile(&pairs, prob))
            .collect();
        out.push(ParamSummary {
            name: name.to_string(),
            q025: q[0],
            q50: q[1],
            q975: q[2],
        });
    }
    out
}

/// Fits the model to an expanded design: explores the hyperparameter
/// posterior, Laplace-approximates the joint conditional at every retained
/// grid point, and assembles summaries and the DIC.
pub fn fit(design: &ExpandedDesign, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if design.n_obs() == 0 {
        return Err(Error::invalid("cannot fit a model without observations"));
    }
    let variant = design.spec().variant;
    let mut warnings: Vec<String> = Vec::new();

    let grid = match variant {
        Variant::M1 => {
            let model = JointModel::new(design, None)?;
            let approx = find_mode(&model, None, config.max_newton_iter)?;
            vec![HyperGridPoint {
                hyper: None,
                log_posterior: approx.log_laplace_marginal(),
                weight: 1.0,
                approx,
            }]
        }
        Variant::M2 | Variant::M3 => build_hyper_grid(design, config, &mut warnings)?,
    };

    let coefficient_summary = summarize_coefficients(design, &grid);
    let hyper_summary = summarize_hypers(&grid);

    let mut result = FitResult {
        variant,
        spec_hash: design.spec().hash(),
        coefficient_names: design.coefficient_names(),
        grid,
        coefficient_summary,
        hyper_summary,
        dic: DicSummary {
            dic: f64::NAN,
            p_d: f64::NAN,
            mean_deviance: f64::NAN,
            fitted_deviance: f64::NAN,
        },
        seed: config.seed,
        samples: config.samples,
        warnings,
    };

    let draws = sample_posterior(&result, config.samples, config.seed)?;
    let thetas: Vec<DVector<f64>> = draws.into_iter().map(|d| d.theta).collect();
    result.dic = dic_from_draws(design, &thetas, &result.posterior_mean())?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, Habitat, ModelSpec, Observation};
    use crate::ordinal::{LinkFunction, OrdinalScale};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn mixture_quantiles_match_reference() {
        // 0.6 N(0,1) + 0.4 N(2, 0.25): quantiles from a high-precision
        // bisection against the exact mixture CDF.
        let components = [(0.6, 0.0, 1.0), (0.4, 2.0, 0.5)];
        assert_abs_diff_eq!(
            mixture_quantile(&components, 0.025),
            -1.7316643961225608,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            mixture_quantile(&components, 0.5),
            0.92595227568789173,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            mixture_quantile(&components, 0.975),
            2.7838679794138468,
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let components = [(1.0, 1.5, 2.0)];
        assert_abs_diff_eq!(mixture_quantile(&components, 0.5), 1.5, epsilon = 1e-10);
        assert_abs_diff_eq!(
            mixture_quantile(&components, 0.975),
            1.5 + 1.9599639845400543 * 2.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn weighted_quantile_interpolates_midpoints() {
        let pairs = [(1.0, 0.2), (2.0, 0.5), (3.0, 0.3)];
        // Cumulative midpoints: 0.1, 0.45, 0.85.
        assert_abs_diff_eq!(weighted_quantile(&pairs, 0.45), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weighted_quantile(&pairs, 0.5), 2.125, epsilon = 1e-12);
        assert_abs_diff_eq!(weighted_quantile(&pairs, 0.05), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weighted_quantile(&pairs, 0.99), 3.0, epsilon = 1e-12);
        // Duplicate values merge.
        let dup = [(2.0, 0.25), (1.0, 0.5), (2.0, 0.25)];
        assert_abs_diff_eq!(weighted_quantile(&dup, 0.95), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_offsets_enumerate_factorial() {
        let offsets = grid_offsets(2, 3);
        assert_eq!(offsets.len(), 9);
        assert_eq!(offsets[0], vec![-1, -1]);
        assert_eq!(offsets[1], vec![-1, 0]);
        assert_eq!(offsets[8], vec![1, 1]);
        assert_eq!(grid_offsets(3, 5).len(), 125);
        assert_eq!(grid_offsets(2, 1), vec![vec![0, 0]]);
    }

    #[test]
    fn boundary_warning_logic() {
        // Highest weight interior: no warning unless the shell dominates.
        let warnings = boundary_warnings(&[true, false, true], &[0.2, 0.6, 0.2]);
        assert!(warnings.is_empty());
        // Highest weight on the boundary.
        let warnings = boundary_warnings(&[true, false, true], &[0.7, 0.2, 0.1]);
        assert_eq!(warnings.len(), 1);
        // Interior argmax but dominant shell.
        let warnings = boundary_warnings(&[true, false, true], &[0.35, 0.36, 0.29]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn config_validation() {
        let design = tiny_design(Variant::M1);
        for bad in [
            FitConfig {
                grid_points_per_dim: 4,
                ..FitConfig::default()
            },
            FitConfig {
                grid_points_per_dim: 0,
                ..FitConfig::default()
            },
            FitConfig {
                samples: 0,
                ..FitConfig::default()
            },
            FitConfig {
                grid_step_scale: 0.0,
                ..FitConfig::default()
            },
        ] {
            assert!(fit(&design, &bad).is_err());
        }
    }

    fn tiny_design(variant: Variant) -> ExpandedDesign {
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, variant);
        let sites = [(0.0, 0.0), (2.5, 1.0), (0.5, 3.0)];
        let scores = [1, 2, 3, 2, 1, 3, 3, 2, 1, 2, 3, 1];
        let observations: Vec<Observation> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| {
                let s = i % sites.len();
                Observation {
                    site_id: format!("s{s}"),
                    x_km: sites[s].0,
                    y_km: sites[s].1,
                    year: 2001 + (i / 6) as i32,
                    species: "heath-runner".to_string(),
                    score,
                    habitat: if s == 0 {
                        Habitat::Forest
                    } else {
                        Habitat::Grassland
                    },
                    access_km: 0.4 + s as f64,
                }
            })
            .collect();
        build_design(&observations, &[], &spec).unwrap()
    }

    fn small_config() -> FitConfig {
        FitConfig {
            grid_points_per_dim: 3,
            samples: 200,
            seed: 7,
            ..FitConfig::default()
        }
    }

    fn assert_summaries_ordered(summaries: &[ParamSummary]) {
        for s in summaries {
            assert!(
                s.q025 <= s.q50 && s.q50 <= s.q975,
                "unordered quantiles for {}: {} {} {}",
                s.name,
                s.q025,
                s.q50,
                s.q975
            );
        }
    }

    #[test]
    fn parametric_fit_has_single_unit_weight_point() {
        let design = tiny_design(Variant::M1);
        let result = fit(&design, &small_config()).unwrap();
        assert_eq!(result.grid.len(), 1);
        assert_abs_diff_eq!(result.grid[0].weight, 1.0);
        assert!(result.grid[0].hyper.is_none());
        assert!(result.hyper_summary.is_empty());
        assert_eq!(result.coefficient_summary.len(), design.n_coef());
        assert_summaries_ordered(&result.coefficient_summary);
        assert!(result.dic.dic.is_finite());
        assert!(result.dic.p_d >= 0.0, "p_D = {}", result.dic.p_d);
    }

    #[test]
    fn spatial_fit_weights_and_summaries() {
        let design = tiny_design(Variant::M2);
        let result = fit(&design, &small_config()).unwrap();
        assert_eq!(result.grid.len(), 9);
        let total: f64 = result.grid.iter().map(|g| g.weight).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        let names: Vec<&str> = result.hyper_summary.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["r", "σ"]);
        assert_summaries_ordered(&result.coefficient_summary);
        assert_summaries_ordered(&result.hyper_summary);
        for s in &result.hyper_summary {
            assert!(s.q025 > 0.0, "hyperparameter {} must stay positive", s.name);
        }
        assert_eq!(result.spec_hash, design.spec().hash());
    }

    #[test]
    fn spacetime_fit_smoke() {
        let design = tiny_design(Variant::M3);
        let result = fit(&design, &small_config()).unwrap();
        assert_eq!(result.grid.len(), 27);
        let total: f64 = result.grid.iter().map(|g| g.weight).sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
        let names: Vec<&str> = result.hyper_summary.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["r", "σ", "ρ"]);
        let rho = &result.hyper_summary[2];
        assert!(rho.q025 > -1.0 && rho.q975 < 1.0);
        assert_summaries_ordered(&result.coefficient_summary);
        assert!(result.dic.dic.is_finite());
    }

    #[test]
    fn fits_are_deterministic() {
        let design = tiny_design(Variant::M2);
        let config = small_config();
        let a = fit(&design, &config).unwrap();
        let b = fit(&design, &config).unwrap();
        let ser_a = serde_json::to_string(&a.coefficient_summary).unwrap();
        let ser_b = serde_json::to_string(&b.coefficient_summary).unwrap();
        assert_eq!(ser_a, ser_b);
        assert_eq!(a.dic.dic.to_bits(), b.dic.dic.to_bits());
        assert_eq!(
            serde_json::to_string(&a.hyper_summary).unwrap(),
            serde_json::to_string(&b.hyper_summary).unwrap()
        );
    }

    #[test]
    fn empty_design_is_rejected() {
        use crate::design::build_design_with;
        use crate::spacetime::KnotSet;
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, Variant::M2);
        let knots = KnotSet::new(vec![(0.0, 0.0)]).unwrap();
        let design = build_design_with(&[], &[], &spec, Some(knots), Some(vec![2000])).unwrap();
        assert!(matches!(
            fit(&design, &FitConfig::default()),
            Err(Error::Invalid(_))
        ));
    }
}

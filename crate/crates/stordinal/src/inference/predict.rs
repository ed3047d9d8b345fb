//! Category-probability prediction at arbitrary space-time targets.
//!
//! For every posterior draw, the latent field at each target is conditioned
//! on the drawn knot values by exact Gaussian conditioning under the draw's
//! grid-point hyperparameters, a conditional value is drawn, and the
//! sign-reversed linear predictor yields the full category distribution.
//! Quantiles across draws summarise each target-category pair.
//!
//! Draw `i` of `n` reuses posterior stream `i` and takes its conditional
//! noise from stream `n + i`, so predictions are reproducible bit for bit
//! for a given seed.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DVector};
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{ExpandedDesign, Habitat, Variant, MIN_ACCESS_KM};
use crate::error::{Error, Result};
use crate::ordinal::{sequential_to_category_probs, SequentialProbs};
use crate::spacetime::matern_cov;

use super::fit::FitResult;
use super::objective::{latent_covariance, Hyperparameters};
use super::sample::{sample_posterior, stream_rng};

/// One prediction location with its covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTarget {
    pub x_km: f64,
    pub y_km: f64,
    pub year: i32,
    /// Control indicator covariate.
    pub ctrl: f64,
    /// Years since the last control event (0 when `ctrl` is 0).
    pub d: f64,
    pub habitat: Habitat,
    pub access_km: f64,
}

/// Posterior predictive quantiles of one category at one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub x_km: f64,
    pub y_km: f64,
    pub year: i32,
    /// 1-based category.
    pub category: usize,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// All prediction rows plus the per-draw probability normalisation audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub rows: Vec<PredictionRow>,
    /// Largest `|sum of category probabilities - 1|` seen across draws.
    pub max_prob_sum_error: f64,
}

/// Conditioning weights and conditional variances of every target under one
/// set of hyperparameters: the conditional latent mean given drawn knot
/// values `u` is `weights . u` and the conditional variance is fixed.
pub(crate) struct TargetConditioner {
    weights: Vec<DVector<f64>>,
    variances: Vec<f64>,
}

impl TargetConditioner {
    pub(crate) fn mean_var(&self, target: usize, u: &DVector<f64>) -> (f64, f64) {
        (self.weights[target].dot(u), self.variances[target])
    }
}

/// Builds the conditioner for one hyperparameter setting.  The cross
/// covariance between a target and a knot copy is the Matern covariance of
/// their distance scaled by the stationary AR(1) factor
/// `rho^{|t* - t|} / (1 - rho^2)` (spatial variant: no temporal factor).
pub(crate) fn build_conditioner(
    design: &ExpandedDesign,
    hyper: Option<&Hyperparameters>,
    targets: &[PredictionTarget],
) -> Result<TargetConditioner> {
    let m = design.latent_dim();
    if design.spec().variant == Variant::M1 {
        return Ok(TargetConditioner {
            weights: vec![DVector::zeros(0); targets.len()],
            variances: vec![0.0; targets.len()],
        });
    }
    let hyper = hyper.ok_or_else(|| {
        Error::invalid("latent-field variants require hyperparameters to predict")
    })?;
    let cov = latent_covariance(design, Some(hyper))?.expect("latent variant has a covariance");
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::numerical("latent covariance lost positive definiteness"))?;

    let matern = &hyper.matern;
    let knots = design.knots();
    let sigma2 = matern.sigma * matern.sigma;
    let (prior_var, ar) = match design.spec().variant {
        Variant::M2 => (sigma2, None),
        Variant::M3 => {
            let ar = hyper
                .ar
                .ok_or_else(|| Error::invalid("space-time prediction requires an AR coefficient"))?;
            (sigma2 / (1.0 - ar.rho * ar.rho), Some(ar))
        }
        Variant::M1 => unreachable!("handled above"),
    };

    let mut weights = Vec::with_capacity(targets.len());
    let mut variances = Vec::with_capacity(targets.len());
    for target in targets {
        let mut cross = DVector::zeros(m);
        for (i, &(kx, ky)) in knots.points().iter().enumerate() {
            let dist = (target.x_km - kx).hypot(target.y_km - ky);
            let spatial = matern_cov(dist, matern)?;
            match ar {
                None => cross[i] = spatial,
                Some(ar) => {
                    let scale = 1.0 / (1.0 - ar.rho * ar.rho);
                    for (t_idx, &year) in design.years().iter().enumerate() {
                        let lag = (target.year - year).abs();
                        let idx = design
                            .latent_index(t_idx, i)
                            .expect("space-time variant has latent indices");
                        cross[idx] = scale * ar.rho.powi(lag) * spatial;
                    }
                }
            }
        }
        let w = chol.solve(&cross);
        let var = (prior_var - cross.dot(&w)).max(0.0);
        weights.push(w);
        variances.push(var);
    }
    Ok(TargetConditioner { weights, variances })
}

/// Linear interpolation quantile of a sorted sample (type 7).
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn validate_targets(targets: &[PredictionTarget]) -> Result<()> {
    for (i, t) in targets.iter().enumerate() {
        if !(t.x_km.is_finite() && t.y_km.is_finite()) {
            return Err(Error::invalid(format!(
                "target {i} has non-finite coordinates"
            )));
        }
        if !(t.ctrl.is_finite() && t.d.is_finite()) {
            return Err(Error::invalid(format!(
                "target {i} has non-finite control covariates"
            )));
        }
        if !(t.access_km.is_finite() && t.access_km >= 0.0) {
            return Err(Error::invalid(format!(
                "target {i} has invalid access distance {}",
                t.access_km
            )));
        }
    }
    Ok(())
}

/// Predicts the posterior predictive category probabilities at each target,
/// reporting the 0.05, 0.50, and 0.95 quantiles across `n_draws` posterior
/// draws for every category.
pub fn predict(
    design: &ExpandedDesign,
    fit: &FitResult,
    targets: &[PredictionTarget],
    n_draws: usize,
    seed: u64,
) -> Result<PredictionSet> {
    if fit.spec_hash != design.spec().hash() {
        return Err(Error::invalid(
            "fit and design come from different model specifications",
        ));
    }
    validate_targets(targets)?;
    if targets.is_empty() {
        return Ok(PredictionSet {
            rows: Vec::new(),
            max_prob_sum_error: 0.0,
        });
    }
    let draws = sample_posterior(fit, n_draws, seed)?;

    let used: BTreeSet<usize> = draws.iter().map(|d| d.grid_index).collect();
    let mut conditioners: Vec<Option<TargetConditioner>> = Vec::new();
    conditioners.resize_with(fit.grid.len(), || None);
    for g in used {
        conditioners[g] = Some(build_conditioner(
            design,
            fit.grid[g].hyper.as_ref(),
            targets,
        )?);
    }

    let p = design.n_coef();
    let q = design.n_cut();
    let m = design.latent_dim();
    let link = design.spec().link;
    let n_cat = q + 1;
    let globals: Vec<[f64; 5]> = targets
        .iter()
        .map(|t| {
            [
                t.ctrl,
                t.d,
                t.year as f64 - design.year_center(),
                if t.habitat == Habitat::Forest { 1.0 } else { 0.0 },
                t.access_km.max(MIN_ACCESS_KM).ln(),
            ]
        })
        .collect();

    let mut samples: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::with_capacity(n_draws); n_cat]; targets.len()];
    let mut max_prob_sum_error = 0.0_f64;

    for (i, draw) in draws.iter().enumerate() {
        let conditioner = conditioners[draw.grid_index]
            .as_ref()
            .expect("conditioner built for every drawn grid point");
        let mut rng = stream_rng(seed, (n_draws + i) as u64);
        let theta = &draw.theta;
        let u = theta.rows(p, m).into_owned();
        for (t_idx, g) in globals.iter().enumerate() {
            let (mean, var) = conditioner.mean_var(t_idx, &u);
            let z: f64 = rng.sample(StandardNormal);
            let u_star = mean + var.sqrt() * z;
            let shift: f64 = g
                .iter()
                .enumerate()
                .map(|(j, gj)| gj * theta[q + j])
                .sum::<f64>()
                + u_star;
            let etas: Vec<f64> = (0..q).map(|c| theta[c] - shift).collect();
            let seq = SequentialProbs::from_linear_predictors(&etas, link)?;
            let probs = sequential_to_category_probs(&seq);
            let total: f64 = probs.as_slice().iter().sum();
            max_prob_sum_error = max_prob_sum_error.max((total - 1.0).abs());
            for (c, &prob) in probs.as_slice().iter().enumerate() {
                samples[t_idx][c].push(prob);
            }
        }
    }

    let mut rows = Vec::with_capacity(targets.len() * n_cat);
    for (t_idx, target) in targets.iter().enumerate() {
        for c in 0..n_cat {
            let series = &mut samples[t_idx][c];
            series.sort_by(|a, b| a.total_cmp(b));
            rows.push(PredictionRow {
                x_km: target.x_km,
                y_km: target.y_km,
                year: target.year,
                category: c + 1,
                q05: sorted_quantile(series, 0.05),
                q50: sorted_quantile(series, 0.5),
                q95: sorted_quantile(series, 0.95),
            });
        }
    }
    Ok(PredictionSet {
        rows,
        max_prob_sum_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, ModelSpec, Observation};
    use crate::inference::fit::{fit, FitConfig};
    use crate::ordinal::{LinkFunction, OrdinalScale};
    use crate::spacetime::{ARParams, MaternParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn observations(variant_years: i32) -> Vec<Observation> {
        let sites = [(0.0, 0.0), (2.0, 1.0), (0.5, 3.0)];
        let scores = [1, 2, 3, 3, 2, 1, 2, 3, 1, 1, 2, 2];
        scores
            .iter()
            .enumerate()
            .map(|(i, &score)| {
                let s = i % sites.len();
                Observation {
                    site_id: format!("s{s}"),
                    x_km: sites[s].0,
                    y_km: sites[s].1,
                    year: 2000 + (i as i32 / 6) % variant_years,
                    species: "heath-runner".to_string(),
                    score,
                    habitat: if s == 1 {
                        Habitat::Forest
                    } else {
                        Habitat::Grassland
                    },
                    access_km: 0.8 + s as f64,
                }
            })
            .collect()
    }

    fn fitted(variant: Variant) -> (ExpandedDesign, FitResult) {
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, variant);
        let design = build_design(&observations(2), &[], &spec).unwrap();
        let config = FitConfig {
            grid_points_per_dim: 3,
            samples: 100,
            seed: 3,
            ..FitConfig::default()
        };
        let result = fit(&design, &config).unwrap();
        (design, result)
    }

    fn target(x: f64, y: f64, year: i32) -> PredictionTarget {
        PredictionTarget {
            x_km: x,
            y_km: y,
            year,
            ctrl: 0.0,
            d: 0.0,
            habitat: Habitat::Grassland,
            access_km: 1.0,
        }
    }

    #[test]
    fn conditioner_matches_dense_joint_oracle() {
        // Exact conditioning must coincide with Schur complementation of the
        // explicitly inverted joint covariance over knots and targets.
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, Variant::M3);
        let design = build_design(&observations(2), &[], &spec).unwrap();
        let hyper = Hyperparameters::spacetime(
            MaternParams::new(0.9, 4.0).unwrap(),
            ARParams::new(0.6).unwrap(),
        );
        let targets = [
            target(1.0, 0.5, 2000),
            target(3.0, 3.0, 2001),
            target(0.1, 0.1, 2001),
        ];
        let conditioner = build_conditioner(&design, Some(&hyper), &targets).unwrap();

        let cov = latent_covariance(&design, Some(&hyper)).unwrap().unwrap();
        let m = cov.nrows();
        let inv = cov.clone().try_inverse().unwrap();
        let knots = design.knots();
        let rho = 0.6_f64;
        let scale_ar = 1.0 / (1.0 - rho * rho);
        for (t_idx, t) in targets.iter().enumerate() {
            let mut cross = DVector::zeros(m);
            for (i, &(kx, ky)) in knots.points().iter().enumerate() {
                let dist = (t.x_km - kx).hypot(t.y_km - ky);
                let spatial = matern_cov(dist, &hyper.matern).unwrap();
                for (y_idx, &year) in design.years().iter().enumerate() {
                    cross[y_idx * knots.len() + i] =
                        scale_ar * rho.powi((t.year - year).abs()) * spatial;
                }
            }
            let oracle_w = &inv * &cross;
            let oracle_var = scale_ar * 0.9 * 0.9 - cross.dot(&oracle_w);
            let u = DVector::from_fn(m, |r, _| 0.3 * (r as f64) - 0.8);
            let (mean, var) = conditioner.mean_var(t_idx, &u);
            assert_relative_eq!(mean, oracle_w.dot(&u), epsilon = 1e-8, max_relative = 1e-8);
            assert_abs_diff_eq!(var, oracle_var, epsilon = 1e-8);
        }
    }

    #[test]
    fn knot_coincident_target_reproduces_knot_value() {
        // A target sitting exactly on a knot in an observed year has
        // conditional variance at the jitter scale and conditional mean equal
        // to the knot value.
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, Variant::M3);
        let design = build_design(&observations(2), &[], &spec).unwrap();
        let hyper = Hyperparameters::spacetime(
            MaternParams::new(0.9, 4.0).unwrap(),
            ARParams::new(0.6).unwrap(),
        );
        let knot0 = design.knots().points()[0];
        let targets = [target(knot0.0, knot0.1, design.years()[1])];
        let conditioner = build_conditioner(&design, Some(&hyper), &targets).unwrap();

        let m = design.latent_dim();
        let u = DVector::from_fn(m, |r, _| (r as f64 * 0.7).sin());
        let (mean, var) = conditioner.mean_var(0, &u);
        let knot_idx = design.latent_index(1, 0).unwrap();
        assert_abs_diff_eq!(mean, u[knot_idx], epsilon = 1e-5);
        assert!(var.abs() < 1e-5, "conditional variance {var} not near zero");
    }

    #[test]
    fn distant_target_reverts_to_the_prior() {
        let scale = OrdinalScale::new(3).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Cloglog, Variant::M2);
        let design = build_design(&observations(1), &[], &spec).unwrap();
        let hyper = Hyperparameters::spatial(MaternParams::new(0.9, 4.0).unwrap());
        let targets = [target(4000.0, 4000.0, 2000)];
        let conditioner = build_conditioner(&design, Some(&hyper), &targets).unwrap();
        let u = DVector::from_element(design.latent_dim(), 5.0);
        let (mean, var) = conditioner.mean_var(0, &u);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_relative_eq!(var, 0.81, max_relative = 1e-9);
    }

    #[test]
    fn rows_cover_all_categories_with_ordered_quantiles() {
        let (design, fit_result) = fitted(Variant::M2);
        let targets = [target(0.5, 0.5, 2000), target(5.0, 5.0, 2001)];
        let set = predict(&design, &fit_result, &targets, 150, 17).unwrap();
        assert_eq!(set.rows.len(), targets.len() * 3);
        assert!(set.max_prob_sum_error < 1e-10, "audit failed: {}", set.max_prob_sum_error);
        for row in &set.rows {
            assert!(row.q05 <= row.q50 && row.q50 <= row.q95);
            assert!(row.q05 >= 0.0 && row.q95 <= 1.0);
        }
        // Every target-year pair appears with categories 1..=3.
        for (t_idx, t) in targets.iter().enumerate() {
            for c in 1..=3 {
                let row = &set.rows[t_idx * 3 + (c - 1)];
                assert_eq!(row.category, c);
                assert_eq!(row.year, t.year);
            }
        }
    }

    #[test]
    fn predictions_are_deterministic() {
        let (design, fit_result) = fitted(Variant::M3);
        let targets = [target(1.0, 1.0, 2001)];
        let a = predict(&design, &fit_result, &targets, 120, 5).unwrap();
        let b = predict(&design, &fit_result, &targets, 120, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = predict(&design, &fit_result, &targets, 120, 6).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn parametric_variant_predicts_without_latent_field() {
        let (design, fit_result) = fitted(Variant::M1);
        let targets = [target(1.0, 1.0, 2000)];
        let set = predict(&design, &fit_result, &targets, 100, 2).unwrap();
        assert_eq!(set.rows.len(), 3);
        assert!(set.max_prob_sum_error < 1e-10);
    }

    #[test]
    fn mismatched_fit_and_design_are_rejected() {
        let (design, _) = fitted(Variant::M2);
        let (_, other_fit) = fitted(Variant::M1);
        let targets = [target(0.0, 0.0, 2000)];
        assert!(predict(&design, &other_fit, &targets, 10, 1).is_err());
    }

    #[test]
    fn invalid_targets_are_rejected() {
        let (design, fit_result) = fitted(Variant::M1);
        let mut bad = target(0.0, 0.0, 2000);
        bad.access_km = -1.0;
        assert!(predict(&design, &fit_result, &[bad], 10, 1).is_err());
        let mut nan = target(0.0, 0.0, 2000);
        nan.x_km = f64::NAN;
        assert!(predict(&design, &fit_result, &[nan], 10, 1).is_err());
    }
}

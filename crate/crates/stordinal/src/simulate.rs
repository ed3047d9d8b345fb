//! Synthetic dataset generation from known ground truth, and a brute-force
//! quadrature reference for validating the Laplace approximation.
//!
//! Everything is deterministic for a given seed: the latent field, the
//! covariate assignment, and the score draws each consume a dedicated
//! counter-mode stream, so regenerating any piece in isolation reproduces
//! exactly what a full dataset simulation used.

use nalgebra::{Cholesky, DVector};
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{
    control_covariates, ControlEvent, ExpandedDesign, Habitat, Observation, ReferenceDay,
    MIN_ACCESS_KM,
};
use crate::error::{Error, Result};
use crate::inference::laplace::{find_mode, DEFAULT_MAX_NEWTON};
use crate::inference::objective::{FixedCoefJoint, Hyperparameters, JointModel, Objective};
use crate::math;
use crate::ordinal::{CategoryProbs, LinkFunction, SequentialProbs};
use crate::spacetime::{build_h, ARParams, KnotSet, MaternParams};

/// RNG stream carrying the latent-field draws.
const FIELD_STREAM: u64 = 0;
/// RNG stream carrying habitat, access, and control-schedule draws.
const COVARIATE_STREAM: u64 = 1;
/// RNG stream carrying the ordinal score draws.
const SCORE_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Global-effect coefficients in design-column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalCoefficients {
    pub ctrl: f64,
    pub duration: f64,
    pub year: f64,
    pub forest: f64,
    pub log_access: f64,
}

impl GlobalCoefficients {
    pub fn as_array(&self) -> [f64; 5] {
        [self.ctrl, self.duration, self.year, self.forest, self.log_access]
    }
}

/// Complete generating mechanism for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub link: LinkFunction,
    pub matern: MaternParams,
    pub ar: ARParams,
    /// Cut-point coefficients; their count fixes the number of categories
    /// at `beta_cuts.len() + 1`.
    pub beta_cuts: Vec<f64>,
    pub beta_global: GlobalCoefficients,
    /// Site locations; each site is a latent-field knot.
    pub sites: KnotSet,
    pub species: String,
    /// Consecutive ascending survey years.
    pub years: Vec<i32>,
    pub obs_per_site_year: usize,
    /// Probability that a site is forested.
    pub forest_prob: f64,
    /// Uniform range of access distances in km.
    pub access_range: (f64, f64),
    /// Per site-year probability of a control event in the preceding year.
    pub control_prob: f64,
    pub seed: u64,
}

impl GroundTruth {
    pub fn categories(&self) -> usize {
        self.beta_cuts.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_cuts.is_empty() {
            return Err(Error::invalid("need at least one cut-point coefficient"));
        }
        if !self.beta_cuts.iter().all(|b| b.is_finite())
            || !self.beta_global.as_array().iter().all(|b| b.is_finite())
        {
            return Err(Error::invalid("coefficients must be finite"));
        }
        if !(self.matern.sigma > 0.0 && self.matern.sigma.is_finite()) {
            return Err(Error::invalid("matern sigma must be positive"));
        }
        if !(self.matern.range > 0.0 && self.matern.range.is_finite()) {
            return Err(Error::invalid("matern range must be positive"));
        }
        if !(self.ar.rho.abs() < 1.0) {
            return Err(Error::invalid("AR coefficient must lie in (-1, 1)"));
        }
        if self.years.is_empty() {
            return Err(Error::invalid("need at least one survey year"));
        }
        if !self.years.windows(2).all(|w| w[1] == w[0] + 1) {
            return Err(Error::invalid("years must be consecutive and ascending"));
        }
        if self.obs_per_site_year == 0 {
            return Err(Error::invalid("need at least one observation per site-year"));
        }
        for (name, p) in [("forest", self.forest_prob), ("control", self.control_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!(
                    "{name} probability {p} must lie in [0, 1]"
                )));
            }
        }
        let (lo, hi) = self.access_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::invalid(format!(
                "access range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if self.species.is_empty() {
            return Err(Error::invalid("species name must not be empty"));
        }
        // Deserialized knot sets skip the constructor, so re-check them here.
        KnotSet::new(self.sites.points().to_vec())?;
        Ok(())
    }
}

/// A simulated dataset together with the latent field that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedData {
    pub observations: Vec<Observation>,
    pub events: Vec<ControlEvent>,
    /// Latent field values: `field[t][i]` is knot `i` in year index `t`.
    pub field: Vec<Vec<f64>>,
}

fn field_with_rng(
    knots: &KnotSet,
    matern: &MaternParams,
    ar: &ARParams,
    n_years: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<DVector<f64>>> {
    let h = build_h(knots, matern)?;
    let chol = Cholesky::new(h)
        .ok_or_else(|| Error::numerical("innovation covariance lost positive definiteness"))?;
    let k = knots.len();
    let mut standard = || DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));

    let mut values = Vec::with_capacity(n_years);
    // chol(H / (1 - rho^2)) = chol(H) / sqrt(1 - rho^2), so the stationary
    // initial draw reuses the innovation factor.
    let stationary_scale = 1.0 / (1.0 - ar.rho * ar.rho).sqrt();
    values.push(chol.l_dirty() * standard() * stationary_scale);
    for t in 1..n_years {
        let innovation = chol.l_dirty() * standard();
        let next = &values[t - 1] * ar.rho + innovation;
        values.push(next);
    }
    Ok(values)
}

/// Draws the latent trajectories `u(1..=n_years)` implied by the truth:
/// `u(1)` from the stationary distribution `N(0, H / (1 - rho^2))` and
/// subsequent years from `u(t) = rho u(t-1) + e(t)` with `e(t) ~ N(0, H)`.
///
/// Uses the same stream of `truth.seed` that [`simulate_dataset`] uses, so
/// with `n_years = truth.years.len()` it reproduces the dataset's field.
pub fn simulate_field(truth: &GroundTruth, n_years: usize) -> Result<Vec<DVector<f64>>> {
    truth.validate()?;
    let mut rng = stream_rng(truth.seed, FIELD_STREAM);
    field_with_rng(&truth.sites, &truth.matern, &truth.ar, n_years, &mut rng)
}

/// Draws one ordinal score by sequential coin flips: category `c` is
/// accepted with the conditional probability `delta_c`, and rejecting every
/// transition lands in the top category.
pub fn draw_score<R: RngExt>(delta: &SequentialProbs, rng: &mut R) -> usize {
    for (c, &d) in delta.as_slice().iter().enumerate() {
        if rng.random::<f64>() < d {
            return c + 1;
        }
    }
    delta.transitions() + 1
}

/// Draws one ordinal score by inverting the categorical distribution.
/// Statistically equivalent to [`draw_score`]; kept as the cross-check.
pub fn draw_score_categorical<R: RngExt>(probs: &CategoryProbs, rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut cum = 0.0;
    for (c, &p) in probs.as_slice().iter().enumerate() {
        cum += p;
        if u < cum {
            return c + 1;
        }
    }
    probs.categories()
}

/// Generates a full synthetic dataset: site covariates, a control-event
/// schedule, the latent field, and sequential-coin-flip ordinal scores.
///
/// Observations come out site-major (site, then year, then replicate); the
/// linear predictor applies the same year centring and sign reversal that
/// design construction applies, so fitting the simulated data targets
/// exactly the generating coefficients.
pub fn simulate_dataset(truth: &GroundTruth) -> Result<SimulatedData> {
    truth.validate()?;
    let k = truth.sites.len();
    let n_years = truth.years.len();
    let q = truth.beta_cuts.len();
    let reference_day = ReferenceDay::default();
    let year_center =
        (truth.years[0] + truth.years[n_years - 1]) as f64 / 2.0;

    let field = {
        let mut rng = stream_rng(truth.seed, FIELD_STREAM);
        field_with_rng(&truth.sites, &truth.matern, &truth.ar, n_years, &mut rng)?
    };

    let mut rng = stream_rng(truth.seed, COVARIATE_STREAM);
    let habitats: Vec<Habitat> = (0..k)
        .map(|_| {
            if rng.random::<f64>() < truth.forest_prob {
                Habitat::Forest
            } else {
                Habitat::Grassland
            }
        })
        .collect();
    let (lo, hi) = truth.access_range;
    let access: Vec<f64> = (0..k)
        .map(|_| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        })
        .collect();
    let mut events = Vec::new();
    for site in 0..k {
        for &year in &truth.years {
            if rng.random::<f64>() < truth.control_prob {
                let days_before = rng.random_range(1..=364u64);
                let reference = reference_day.for_year(year)?;
                events.push(ControlEvent {
                    species: truth.species.clone(),
                    site_id: format!("s{site}"),
                    date: reference - chrono::Days::new(days_before),
                });
            }
        }
    }

    let mut rng = stream_rng(truth.seed, SCORE_STREAM);
    let beta_global = truth.beta_global.as_array();
    let mut observations = Vec::with_capacity(k * n_years * truth.obs_per_site_year);
    for site in 0..k {
        let (x_km, y_km) = truth.sites.points()[site];
        for (t, &year) in truth.years.iter().enumerate() {
            let template = Observation {
                site_id: format!("s{site}"),
                x_km,
                y_km,
                year,
                species: truth.species.clone(),
                score: 1,
                habitat: habitats[site],
                access_km: access[site],
            };
            let reference = reference_day.for_year(year)?;
            let (ctrl, d) = control_covariates(&template, reference, &events);
            let globals = [
                ctrl,
                d,
                f64::from(year) - year_center,
                if habitats[site] == Habitat::Forest { 1.0 } else { 0.0 },
                access[site].max(MIN_ACCESS_KM).ln(),
            ];
            let shift: f64 = globals
                .iter()
                .zip(&beta_global)
                .map(|(g, b)| g * b)
                .sum::<f64>()
                + field[t][site];
            let etas: Vec<f64> = (0..q).map(|c| truth.beta_cuts[c] - shift).collect();
            let delta = SequentialProbs::from_linear_predictors(&etas, truth.link)?;
            for _ in 0..truth.obs_per_site_year {
                let mut obs = template.clone();
                obs.score = draw_score(&delta, &mut rng);
                observations.push(obs);
            }
        }
    }

    Ok(SimulatedData {
        observations,
        events,
        field: field.iter().map(|u| u.as_slice().to_vec()).collect(),
    })
}

/// Log marginal likelihood by brute-force nested adaptive quadrature, with
/// all coefficients pinned to `beta` except an optional single free one.
///
/// Integrates `exp(-f)` over a box of +-10 posterior standard deviations
/// around the mode in each free dimension.  Only defined up to three free
/// dimensions; intended for validating [`log_laplace_marginal`] on tiny
/// instances.
///
/// [`log_laplace_marginal`]: crate::inference::laplace::log_laplace_marginal
pub fn brute_marginal(
    design: &ExpandedDesign,
    hyper: Option<&Hyperparameters>,
    beta: &[f64],
    free_coef: Option<usize>,
) -> Result<f64> {
    let model = JointModel::new(design, hyper)?;
    let fixed = FixedCoefJoint::new(&model, beta, free_coef)?;
    let dim = fixed.dim();
    if dim == 0 {
        return Ok(0.0);
    }
    if dim > 3 {
        return Err(Error::invalid(format!(
            "brute-force quadrature supports at most 3 free dimensions, got {dim}"
        )));
    }
    let approx = find_mode(&fixed, None, DEFAULT_MAX_NEWTON)?;
    let center = approx.mode.clone();
    let sd = approx.marginal_sd();
    let f0 = approx.objective_at_mode;
    let lo: Vec<f64> = (0..dim).map(|i| center[i] - 10.0 * sd[i]).collect();
    let hi: Vec<f64> = (0..dim).map(|i| center[i] + 10.0 * sd[i]).collect();

    let mut point = DVector::zeros(dim);
    let density = |point: &DVector<f64>, fixed: &FixedCoefJoint| -> f64 {
        match fixed.value(point) {
            Ok(f) => (-(f - f0)).exp(),
            Err(_) => 0.0,
        }
    };
    let integral = match dim {
        1 => math::integrate(
            &mut |x| {
                point[0] = x;
                density(&point, &fixed)
            },
            lo[0],
            hi[0],
            1e-12,
        ),
        2 => math::integrate(
            &mut |x| {
                point[0] = x;
                let mut inner_point = point.clone();
                math::integrate(
                    &mut |y| {
                        inner_point[1] = y;
                        density(&inner_point, &fixed)
                    },
                    lo[1],
                    hi[1],
                    1e-12,
                )
            },
            lo[0],
            hi[0],
            1e-10,
        ),
        _ => math::integrate(
            &mut |x| {
                let mut mid_point = point.clone();
                mid_point[0] = x;
                math::integrate(
                    &mut |y| {
                        mid_point[1] = y;
                        let mut inner_point = mid_point.clone();
                        math::integrate(
                            &mut |z| {
                                inner_point[2] = z;
                                density(&inner_point, &fixed)
                            },
                            lo[2],
                            hi[2],
                            1e-12,
                        )
                    },
                    lo[1],
                    hi[1],
                    1e-11,
                )
            },
            lo[0],
            hi[0],
            1e-9,
        ),
    };
    if !(integral.is_finite() && integral > 0.0) {
        return Err(Error::numerical(format!(
            "brute-force quadrature produced a non-positive integral {integral}"
        )));
    }
    Ok(integral.ln() - f0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, build_design_with, ModelSpec, Variant};
    use crate::ordinal::{sequential_to_category_probs, OrdinalScale};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn grid_sites(nx: usize, ny: usize, spacing: f64) -> KnotSet {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push((i as f64 * spacing, j as f64 * spacing));
            }
        }
        KnotSet::new(pts).unwrap()
    }

    fn base_truth() -> GroundTruth {
        GroundTruth {
            link: LinkFunction::Cloglog,
            matern: MaternParams::new(1.0, 5.0).unwrap(),
            ar: ARParams::new(0.6).unwrap(),
            beta_cuts: vec![-0.5, 0.3, 1.0],
            beta_global: GlobalCoefficients {
                ctrl: 0.4,
                duration: -0.2,
                year: 0.1,
                forest: 0.5,
                log_access: -0.3,
            },
            sites: grid_sites(3, 3, 4.0),
            species: "heath-runner".to_string(),
            years: vec![2000, 2001, 2002],
            obs_per_site_year: 2,
            forest_prob: 0.4,
            access_range: (0.5, 3.0),
            control_prob: 0.3,
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_bad_truths() {
        let mut t = base_truth();
        t.beta_cuts.clear();
        assert!(t.validate().is_err());

        let mut t = base_truth();
        t.years = vec![2000, 2002];
        assert!(t.validate().is_err());

        let mut t = base_truth();
        t.forest_prob = 1.5;
        assert!(t.validate().is_err());

        let mut t = base_truth();
        t.access_range = (0.0, 1.0);
        assert!(t.validate().is_err());

        let mut t = base_truth();
        t.obs_per_site_year = 0;
        assert!(t.validate().is_err());

        let mut t = base_truth();
        t.ar.rho = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn field_simulation_is_deterministic_and_matches_dataset() {
        let truth = base_truth();
        let a = simulate_field(&truth, 3).unwrap();
        let b = simulate_field(&truth, 3).unwrap();
        for (ua, ub) in a.iter().zip(&b) {
            assert_eq!(ua, ub);
        }
        let data = simulate_dataset(&truth).unwrap();
        for (t, u) in a.iter().enumerate() {
            assert_eq!(u.as_slice(), data.field[t].as_slice());
        }
    }

    #[test]
    fn dataset_simulation_is_deterministic_and_seed_sensitive() {
        let truth = base_truth();
        let a = simulate_dataset(&truth).unwrap();
        let b = simulate_dataset(&truth).unwrap();
        assert_eq!(a, b);
        let mut other = base_truth();
        other.seed = 12;
        let c = simulate_dataset(&other).unwrap();
        assert_ne!(
            a.observations.iter().map(|o| o.score).collect::<Vec<_>>(),
            c.observations.iter().map(|o| o.score).collect::<Vec<_>>()
        );
    }

    #[test]
    fn simulated_data_builds_a_design() {
        let truth = base_truth();
        let data = simulate_dataset(&truth).unwrap();
        assert_eq!(
            data.observations.len(),
            truth.sites.len() * truth.years.len() * truth.obs_per_site_year
        );
        let scale = OrdinalScale::new(truth.categories()).unwrap();
        let spec = ModelSpec::new(scale, truth.link, Variant::M3);
        let design = build_design(&data.observations, &data.events, &spec).unwrap();
        assert_eq!(design.years(), &truth.years[..]);
        // Knots inferred from observations are the simulation sites.
        assert_eq!(design.knots().len(), truth.sites.len());
    }

    #[test]
    fn zero_autocorrelation_gives_uncorrelated_years() {
        let mut truth = base_truth();
        truth.ar = ARParams::new(0.0).unwrap();
        truth.sites = grid_sites(2, 1, 30.0);
        let field = simulate_field(&truth, 4000).unwrap();
        // Lag-1 sample correlation at each knot stays inside the MC band.
        for knot in 0..truth.sites.len() {
            let series: Vec<f64> = field.iter().map(|u| u[knot]).collect();
            let n = series.len() - 1;
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for t in 0..n {
                num += (series[t] - mean) * (series[t + 1] - mean);
            }
            for s in &series {
                den += (s - mean) * (s - mean);
            }
            let lag1 = num / den;
            assert!(
                lag1.abs() < 4.0 / (n as f64).sqrt(),
                "lag-1 correlation {lag1} out of band"
            );
        }
    }

    #[test]
    fn vanishing_scale_collapses_the_field() {
        let mut truth = base_truth();
        truth.matern = MaternParams::new(1e-10, 5.0).unwrap();
        let field = simulate_field(&truth, 5).unwrap();
        for u in &field {
            assert!(u.amax() < 1e-8, "field did not collapse: {}", u.amax());
        }
    }

    #[test]
    fn long_run_variance_matches_stationary_marginal() {
        let mut truth = base_truth();
        truth.sites = grid_sites(1, 1, 1.0);
        truth.ar = ARParams::new(0.5).unwrap();
        truth.matern = MaternParams::new(1.0, 5.0).unwrap();
        let field = simulate_field(&truth, 40_000).unwrap();
        let values: Vec<f64> = field.iter().map(|u| u[0]).collect();
        let var = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
        // sigma^2 / (1 - rho^2) = 4/3; chi-square MC band of ~4 sigma.
        let expect = 1.0 / (1.0 - 0.25);
        let band = 4.0 * expect * (2.0 / values.len() as f64).sqrt();
        assert_abs_diff_eq!(var, expect, epsilon = band);
    }

    #[test]
    fn huge_first_cut_forces_bottom_category() {
        let mut truth = base_truth();
        truth.beta_cuts = vec![40.0, 0.0, 0.0];
        let data = simulate_dataset(&truth).unwrap();
        assert!(data.observations.iter().all(|o| o.score == 1));
    }

    #[test]
    fn large_positive_global_effect_pushes_scores_up() {
        // A strongly positive coefficient on a positive covariate suppresses
        // every transition probability, concentrating mass on the top
        // category: larger global effects increase the high-score odds.
        let mut truth = base_truth();
        truth.forest_prob = 1.0;
        truth.beta_global.forest = 40.0;
        let data = simulate_dataset(&truth).unwrap();
        assert!(data.observations.iter().all(|o| o.score == 4));
    }

    #[test]
    fn coin_flip_frequencies_match_the_category_distribution() {
        use rand::SeedableRng;
        let delta = SequentialProbs::new(vec![0.25, 0.4, 0.55, 0.3]).unwrap();
        let pi = sequential_to_category_probs(&delta);
        let n = 100_000usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0usize; pi.categories()];
        for _ in 0..n {
            counts[draw_score(&delta, &mut rng) - 1] += 1;
        }
        for (c, &p) in pi.as_slice().iter().enumerate() {
            let freq = counts[c] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * se,
                "category {c}: frequency {freq} vs probability {p}"
            );
        }
    }

    #[test]
    fn coin_flips_and_categorical_inversion_are_equivalent() {
        use rand::SeedableRng;
        // Two-sample chi-square homogeneity test between the samplers at
        // 1e5 draws each; the 1% critical value for 4 degrees of freedom is
        // 13.2767.
        let delta = SequentialProbs::new(vec![0.3, 0.45, 0.2, 0.6]).unwrap();
        let pi = sequential_to_category_probs(&delta);
        let n = 100_000usize;
        let mut rng_a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let c = pi.categories();
        let mut counts_a = vec![0f64; c];
        let mut counts_b = vec![0f64; c];
        for _ in 0..n {
            counts_a[draw_score(&delta, &mut rng_a) - 1] += 1.0;
            counts_b[draw_score_categorical(&pi, &mut rng_b) - 1] += 1.0;
        }
        let mut statistic = 0.0;
        for j in 0..c {
            let pooled = (counts_a[j] + counts_b[j]) / 2.0;
            statistic += (counts_a[j] - pooled).powi(2) / pooled;
            statistic += (counts_b[j] - pooled).powi(2) / pooled;
        }
        // chi-square(4) critical value at alpha = 0.01: 13.276704135987622.
        assert!(
            statistic < 13.276704135987622,
            "homogeneity statistic {statistic} exceeds the 1% critical value"
        );
    }

    fn tiny_design(scores: &[usize]) -> ExpandedDesign {
        let scale = OrdinalScale::new(2).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Logit, Variant::M2);
        let observations: Vec<Observation> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Observation {
                site_id: format!("s{}", i % 2),
                x_km: (i % 2) as f64 * 3.0,
                y_km: 0.0,
                year: 2000,
                species: "heath-runner".to_string(),
                score,
                habitat: Habitat::Grassland,
                access_km: 1.0,
            })
            .collect();
        build_design(&observations, &[], &spec).unwrap()
    }

    #[test]
    fn zero_observation_marginal_is_one() {
        let scale = OrdinalScale::new(2).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Logit, Variant::M2);
        let knots = KnotSet::new(vec![(0.0, 0.0), (4.0, 0.0)]).unwrap();
        let design =
            build_design_with(&[], &[], &spec, Some(knots), Some(vec![2000])).unwrap();
        let hyper = Hyperparameters::spatial(MaternParams::new(1.0, 3.0).unwrap());
        let beta = vec![0.0; design.n_coef()];
        let log_marginal = brute_marginal(&design, Some(&hyper), &beta, None).unwrap();
        assert_abs_diff_eq!(log_marginal, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn brute_marginal_matches_known_one_dimensional_value() {
        // Single top-category logit observation with a standard normal
        // prior: the exact marginal is 1/2 and the Laplace approximation is
        // known to land 7.5e-3 below it.
        let scale = OrdinalScale::new(2).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Logit, Variant::M2);
        let obs = Observation {
            site_id: "s0".to_string(),
            x_km: 0.0,
            y_km: 0.0,
            year: 2000,
            species: "heath-runner".to_string(),
            score: 2,
            habitat: Habitat::Grassland,
            access_km: 1.0,
        };
        let design = build_design(&[obs], &[], &spec).unwrap();
        let hyper = Hyperparameters::spatial(MaternParams::new(1.0, 3.0).unwrap());
        let beta = vec![0.0; design.n_coef()];
        let brute = brute_marginal(&design, Some(&hyper), &beta, None).unwrap();
        assert_abs_diff_eq!(brute, 0.5f64.ln(), epsilon = 1e-7);

        let model = JointModel::new(&design, Some(&hyper)).unwrap();
        let fixed = FixedCoefJoint::new(&model, &beta, None).unwrap();
        let approx = find_mode(&fixed, None, DEFAULT_MAX_NEWTON).unwrap();
        assert_abs_diff_eq!(
            approx.log_laplace_marginal() - brute,
            -0.0075079423298362036,
            epsilon = 1e-7
        );
    }

    #[test]
    fn symmetric_instances_have_identical_marginals() {
        // Flipping every expanded response and negating eta leaves the logit
        // likelihood invariant; with a symmetric prior and zero coefficients
        // the two-category instances (all score 1) and (all score 2) must
        // integrate identically.
        let design_low = tiny_design(&[1, 1]);
        let design_high = tiny_design(&[2, 2]);
        let hyper = Hyperparameters::spatial(MaternParams::new(0.9, 4.0).unwrap());
        let beta = vec![0.0; design_low.n_coef()];
        let low = brute_marginal(&design_low, Some(&hyper), &beta, None).unwrap();
        let high = brute_marginal(&design_high, Some(&hyper), &beta, None).unwrap();
        assert_relative_eq!(low, high, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn laplace_tracks_brute_marginal_on_two_dimensional_instances() {
        // A well-identified two-knot instance: the posterior is tight enough
        // that the fourth-order Laplace error sits well below 1e-3.
        let scores: Vec<usize> = (0..80).map(|i| (i * 5 + i / 3) % 2 + 1).collect();
        let design = tiny_design(&scores);
        let hyper = Hyperparameters::spatial(MaternParams::new(0.15, 4.0).unwrap());
        let beta = vec![0.2; design.n_coef()];
        let brute = brute_marginal(&design, Some(&hyper), &beta, None).unwrap();
        let model = JointModel::new(&design, Some(&hyper)).unwrap();
        let fixed = FixedCoefJoint::new(&model, &beta, None).unwrap();
        let approx = find_mode(&fixed, None, DEFAULT_MAX_NEWTON).unwrap();
        assert_abs_diff_eq!(approx.log_laplace_marginal(), brute, epsilon = 1e-3);
        // The gap is genuinely nonzero; the quadrature is orders tighter.
        assert!((approx.log_laplace_marginal() - brute).abs() > 1e-8);
    }

    #[test]
    fn free_coefficient_dimension_is_integrated() {
        // One latent knot plus one free coefficient: quadrature in two
        // dimensions.  The free cut coefficient has the diffuse coefficient
        // prior, so its likelihood-dominated posterior keeps the Laplace
        // error at the 1e-3 scale even with 60 observations.
        let scale = OrdinalScale::new(2).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Logit, Variant::M2);
        let observations: Vec<Observation> = (0..60)
            .map(|i| Observation {
                site_id: "s0".to_string(),
                x_km: 0.0,
                y_km: 0.0,
                year: 2000,
                species: "heath-runner".to_string(),
                score: i % 2 + 1,
                habitat: Habitat::Grassland,
                access_km: 1.0,
            })
            .collect();
        let design = build_design(&observations, &[], &spec).unwrap();
        let hyper = Hyperparameters::spatial(MaternParams::new(0.25, 3.0).unwrap());
        let beta = vec![0.0; design.n_coef()];
        let brute = brute_marginal(&design, Some(&hyper), &beta, Some(0)).unwrap();
        let model = JointModel::new(&design, Some(&hyper)).unwrap();
        let fixed = FixedCoefJoint::new(&model, &beta, Some(0)).unwrap();
        let approx = find_mode(&fixed, None, DEFAULT_MAX_NEWTON).unwrap();
        assert_abs_diff_eq!(approx.log_laplace_marginal(), brute, epsilon = 1e-2);
        assert!(brute.is_finite());
    }

    #[test]
    fn too_many_free_dimensions_are_rejected() {
        let scale = OrdinalScale::new(2).unwrap();
        let spec = ModelSpec::new(scale, LinkFunction::Logit, Variant::M2);
        let knots = KnotSet::new(vec![
            (0.0, 0.0),
            (5.0, 0.0),
            (0.0, 5.0),
            (5.0, 5.0),
        ])
        .unwrap();
        let design =
            build_design_with(&[], &[], &spec, Some(knots), Some(vec![2000])).unwrap();
        let hyper = Hyperparameters::spatial(MaternParams::new(1.0, 3.0).unwrap());
        let beta = vec![0.0; design.n_coef()];
        assert!(brute_marginal(&design, Some(&hyper), &beta, None).is_err());
    }
}

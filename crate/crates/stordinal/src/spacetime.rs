//! Spatio-temporal covariance building blocks: a Matern spatial kernel of
//! fixed smoothness 1, an AR(1) process across years, their separable
//! product covariance over a knot grid, and the penalised-complexity (PC)
//! priors used for the kernel hyperparameters.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed Matern smoothness; the kernel is `sigma^2 (theta d) K_1(theta d)`.
pub const MATERN_ORDER: f64 = 1.0;

/// Relative jitter first added to the spatial covariance diagonal.
pub const JITTER_REL_START: f64 = 1e-8;

/// Largest relative jitter tried before giving up on a factorization.
pub const JITTER_REL_MAX: f64 = 1e-4;

/// Marginal standard deviation and spatial range of a Matern kernel.
///
/// `range` is the distance at which correlation falls to roughly 0.13,
/// giving the scaling `theta = sqrt(8) / range` for smoothness 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma: f64,
    pub range: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, range: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("matern sigma {sigma} must be > 0")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::invalid(format!("matern range {range} must be > 0")));
        }
        Ok(MaternParams { sigma, range })
    }

    /// Inverse length scale `sqrt(8 * order) / range`.
    pub fn theta(&self) -> f64 {
        (8.0 * MATERN_ORDER).sqrt() / self.range
    }
}

/// Matern covariance (smoothness 1) at distance `d >= 0`.
pub fn matern_cov(d: f64, params: &MaternParams) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid(format!("distance {d} must be >= 0")));
    }
    let s2 = params.sigma * params.sigma;
    if d == 0.0 {
        return Ok(s2);
    }
    let x = params.theta() * d;
    Ok(s2 * x * puruspe::Kn(1, x))
}

/// Lag-one autocorrelation of the yearly AR(1) innovations process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ARParams {
    pub rho: f64,
}

impl ARParams {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::invalid(format!(
                "AR coefficient {rho} must lie in (-1,1)"
            )));
        }
        Ok(ARParams { rho })
    }
}

/// A set of pairwise-distinct planar knot locations (km coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    points: Vec<(f64, f64)>,
}

impl KnotSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("need at least one knot"));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.0.is_finite() && p.1.is_finite()) {
                return Err(Error::invalid(format!("knot {i} has non-finite coordinates")));
            }
            if points[..i]
                .iter()
                .any(|q| q.0.to_bits() == p.0.to_bits() && q.1.to_bits() == p.1.to_bits())
            {
                return Err(Error::invalid(format!(
                    "duplicate knot at ({}, {})",
                    p.0, p.1
                )));
            }
        }
        Ok(KnotSet { points })
    }

    /// Build from possibly repeated locations, keeping the first occurrence
    /// of each distinct point in input order.
    pub fn dedup_from(points: &[(f64, f64)]) -> Result<Self> {
        let mut kept: Vec<(f64, f64)> = Vec::new();
        for p in points {
            if !kept
                .iter()
                .any(|q| q.0.to_bits() == p.0.to_bits() && q.1.to_bits() == p.1.to_bits())
            {
                kept.push(*p);
            }
        }
        KnotSet::new(kept)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.points[i];
        let (xj, yj) = self.points[j];
        (xi - xj).hypot(yi - yj)
    }

    /// Index of the knot closest to `p` (ties resolved to the lowest index).
    pub fn nearest(&self, p: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.points.iter().enumerate() {
            let d = (q.0 - p.0).hypot(q.1 - p.1);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Deterministic farthest-point thinning to `m` knots: keep the first
    /// knot, then repeatedly add the knot farthest from the kept set (ties
    /// resolved to the lowest index).
    pub fn thin_farthest(&self, m: usize) -> Result<KnotSet> {
        if m < 1 || m > self.points.len() {
            return Err(Error::invalid(format!(
                "cannot thin {} knots to {m}",
                self.points.len()
            )));
        }
        let n = self.points.len();
        let mut kept = vec![0usize];
        let mut min_d: Vec<f64> = (0..n).map(|i| self.distance(0, i)).collect();
        while kept.len() < m {
            let mut best = usize::MAX;
            let mut best_d = -1.0;
            for (i, &d) in min_d.iter().enumerate() {
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            kept.push(best);
            for i in 0..n {
                let d = self.distance(best, i);
                if d < min_d[i] {
                    min_d[i] = d;
                }
            }
        }
        kept.sort_unstable();
        KnotSet::new(kept.into_iter().map(|i| self.points[i]).collect())
    }
}

/// Add an escalating diagonal jitter to a symmetric matrix until it admits
/// a Cholesky factorization: starting from `JITTER_REL_START * unit` and
/// multiplying by 10 up to `JITTER_REL_MAX * unit`. Returns the jittered
/// matrix together with the jitter that succeeded.
pub(crate) fn jittered_spd(m: &DMatrix<f64>, unit: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let mut jitter = JITTER_REL_START * unit;
    loop {
        let mut trial = m.clone();
        for i in 0..n {
            trial[(i, i)] += jitter;
        }
        if Cholesky::new(trial.clone()).is_some() {
            return Ok((trial, jitter));
        }
        jitter *= 10.0;
        if jitter > JITTER_REL_MAX * unit * (1.0 + 1e-12) {
            return Err(Error::numerical(format!(
                "{n} x {n} covariance is not positive definite even with \
                 relative jitter {JITTER_REL_MAX:e}"
            )));
        }
    }
}

/// Dense spatial covariance over the knots with an escalating diagonal
/// jitter: starting from `1e-8 sigma^2`, the jitter is multiplied by 10
/// until the matrix admits a Cholesky factorization, failing beyond
/// `1e-4 sigma^2`.
pub fn build_h(knots: &KnotSet, matern: &MaternParams) -> Result<DMatrix<f64>> {
    let k = knots.len();
    let s2 = matern.sigma * matern.sigma;
    let mut h = DMatrix::zeros(k, k);
    for i in 0..k {
        h[(i, i)] = s2;
        for j in 0..i {
            let v = matern_cov(knots.distance(i, j), matern)?;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(jittered_spd(&h, s2)?.0)
}

/// Stationary covariance of the AR(1)-in-time process with innovation
/// covariance `h`: block `(t, t')` equals `rho^{|t-t'|} h / (1 - rho^2)`,
/// laid out year-major (latent index `t * k + i`).
pub fn stationary_cov(h: &DMatrix<f64>, ar: &ARParams, n_years: usize) -> Result<DMatrix<f64>> {
    if n_years == 0 {
        return Err(Error::invalid("need at least one year"));
    }
    let k = h.nrows();
    if h.ncols() != k {
        return Err(Error::dimension("spatial covariance must be square"));
    }
    let scale = 1.0 / (1.0 - ar.rho * ar.rho);
    let mut cov = DMatrix::zeros(k * n_years, k * n_years);
    for t in 0..n_years {
        for tp in 0..n_years {
            let w = scale * ar.rho.powi((t as i32 - tp as i32).abs());
            for i in 0..k {
                for j in 0..k {
                    cov[(t * k + i, tp * k + j)] = w * h[(i, j)];
                }
            }
        }
    }
    Ok(cov)
}

/// Full separable space-time covariance over `n_years` copies of the knot
/// set (Matern in space, stationary AR(1) across years).
pub fn joint_spacetime_cov(
    knots: &KnotSet,
    matern: &MaternParams,
    ar: &ARParams,
    n_years: usize,
) -> Result<DMatrix<f64>> {
    let h = build_h(knots, matern)?;
    stationary_cov(&h, ar, n_years)
}

/// Which transformation of the hyperparameter a PC prior penalises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PCPriorKind {
    /// Exponential prior on a standard deviation (base model: sd 0).
    Sd,
    /// Prior on a two-dimensional Matern range (base model: infinite range).
    Range2d,
    /// Prior on a lag-one autocorrelation (base model: correlation 1).
    Cor1,
}

/// A penalised-complexity prior calibrated through a tail statement:
/// `P(sd > u) = alpha`, `P(range < u) = alpha`, or `P(cor > u) = alpha`
/// depending on the kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PCPrior {
    pub kind: PCPriorKind,
    pub u: f64,
    pub alpha: f64,
}

impl PCPrior {
    /// `P(sigma > u) = alpha` for a standard deviation.
    pub fn sd(u: f64, alpha: f64) -> Result<Self> {
        if !(u > 0.0 && u.is_finite()) {
            return Err(Error::invalid(format!("pc sd threshold {u} must be > 0")));
        }
        check_alpha(alpha)?;
        Ok(PCPrior {
            kind: PCPriorKind::Sd,
            u,
            alpha,
        })
    }

    /// `P(range < u) = alpha` for a two-dimensional Matern range.
    pub fn range2d(u: f64, alpha: f64) -> Result<Self> {
        if !(u > 0.0 && u.is_finite()) {
            return Err(Error::invalid(format!(
                "pc range threshold {u} must be > 0"
            )));
        }
        check_alpha(alpha)?;
        Ok(PCPrior {
            kind: PCPriorKind::Range2d,
            u,
            alpha,
        })
    }

    /// `P(cor > u) = alpha` for a lag-one autocorrelation shrunk towards 1.
    /// Feasibility demands `alpha > sqrt((1 - u) / 2)`.
    pub fn cor1(u: f64, alpha: f64) -> Result<Self> {
        if !(u > -1.0 && u < 1.0) {
            return Err(Error::invalid(format!(
                "pc correlation threshold {u} must lie in (-1,1)"
            )));
        }
        check_alpha(alpha)?;
        let floor = ((1.0 - u) / 2.0).sqrt();
        if alpha <= floor {
            return Err(Error::invalid(format!(
                "pc correlation prior needs alpha > sqrt((1-u)/2) = {floor:.6}, got {alpha}"
            )));
        }
        Ok(PCPrior {
            kind: PCPriorKind::Cor1,
            u,
            alpha,
        })
    }

    /// The exponential decay rate `lambda` implied by the tail statement.
    pub fn rate(&self) -> f64 {
        match self.kind {
            // P(sd > u) = exp(-lambda u) = alpha
            PCPriorKind::Sd => -self.alpha.ln() / self.u,
            // P(range < u) = exp(-lambda / u) = alpha
            PCPriorKind::Range2d => -self.alpha.ln() * self.u,
            PCPriorKind::Cor1 => {
                // solve P(cor > u) = alpha for the rate on d = sqrt(1-cor),
                // truncated to d < sqrt(2); monotone increasing in lambda
                let du = (1.0 - self.u).sqrt();
                let root2 = 2f64.sqrt();
                let tail = |lam: f64| (-lam * du).exp_m1() / (-lam * root2).exp_m1();
                let (mut lo, mut hi) = (1e-12, 1e4);
                debug_assert!(tail(lo) < self.alpha && tail(hi) > self.alpha);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if tail(mid) < self.alpha {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Log prior density at `x` (a sd, a range, or a correlation).
    pub fn log_density(&self, x: f64) -> Result<f64> {
        let lambda = self.rate();
        match self.kind {
            PCPriorKind::Sd => {
                if !(x >= 0.0) {
                    return Err(Error::invalid(format!("sd {x} must be >= 0")));
                }
                Ok(lambda.ln() - lambda * x)
            }
            PCPriorKind::Range2d => {
                if !(x > 0.0) {
                    return Err(Error::invalid(format!("range {x} must be > 0")));
                }
                Ok(lambda.ln() - 2.0 * x.ln() - lambda / x)
            }
            PCPriorKind::Cor1 => {
                if !(x > -1.0 && x < 1.0) {
                    return Err(Error::invalid(format!(
                        "correlation {x} must lie in (-1,1)"
                    )));
                }
                let d = (1.0 - x).sqrt();
                let z = -(-lambda * 2f64.sqrt()).exp_m1();
                Ok(lambda.ln() - lambda * d - (2.0 * d).ln() - z.ln())
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "tail probability {alpha} must lie in (0,1)"
        )));
    }
    Ok(())
}

//! Ordinal scales, link functions, and the sequential (continuation-ratio)
//! category model.
//!
//! An ordinal score `z` on a scale with `C` categories is recast as a short
//! sequence of binary transition outcomes: transition `c` asks "did the
//! process stop at category c, given it reached c?". The transition
//! probabilities `delta_c` come through an inverse link from linear
//! predictors, and category probabilities are the telescoping products
//! `pi_c = delta_c * prod_{m<c} (1 - delta_m)` with `pi_C` the survivor
//! product. Under the complementary log-log link the same model is a
//! discretised proportional-hazards model, which gives closed-form maps
//! between sequential and cumulative threshold parameterisations and makes
//! the scale collapsible over contiguous category blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Inverse-link outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` so
/// that Bernoulli log-likelihood terms stay finite.
pub const PROB_CLAMP: f64 = 1e-15;

/// An ordered categorical scale with `C >= 2` labelled categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalScale {
    labels: Vec<String>,
}

impl OrdinalScale {
    /// Scale with `categories` levels labelled "1".."C".
    pub fn new(categories: usize) -> Result<Self> {
        Self::with_labels((1..=categories).map(|c| c.to_string()).collect())
    }

    /// Scale with explicit ordered labels (at least two, pairwise distinct).
    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid(format!(
                "an ordinal scale needs at least 2 categories, got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate category label {a:?}")));
            }
        }
        Ok(OrdinalScale { labels })
    }

    /// Number of categories `C`.
    pub fn categories(&self) -> usize {
        self.labels.len()
    }

    /// Number of transitions `q = C - 1`.
    pub fn transitions(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Link `g` mapping a probability to the linear-predictor scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    /// Complementary log-log, `g(p) = log(-log(1 - p))`. Under the
    /// sequential model this is the discrete proportional-hazards link.
    Cloglog,
    Logit,
    Probit,
}

impl LinkFunction {
    /// `g(p)`. Errors if `p` is outside the open interval (0, 1).
    pub fn eval(self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("link argument {p} outside (0,1)")));
        }
        Ok(match self {
            LinkFunction::Cloglog => (-(-p).ln_1p()).ln(),
            LinkFunction::Logit => p.ln() - (-p).ln_1p(),
            LinkFunction::Probit => math::norm_quantile(p),
        })
    }

    /// `g^{-1}(eta)`, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn inverse(self, eta: f64) -> f64 {
        let p = match self {
            LinkFunction::Cloglog => -(-eta.exp()).exp_m1(),
            LinkFunction::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            LinkFunction::Probit => math::norm_cdf(eta),
        };
        p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Bernoulli log-likelihood `y log mu + (1-y) log(1-mu)` with
    /// `mu = g^{-1}(eta)`. Computed in closed form on the unclamped scale
    /// so that it stays consistent with `bernoulli_score` for extreme
    /// linear predictors; `y` must be 0 or 1.
    pub fn bernoulli_loglik(self, y: f64, eta: f64) -> f64 {
        match self {
            LinkFunction::Cloglog => {
                let w = eta.exp();
                if y >= 0.5 {
                    // log(1 - e^{-w}); ~ eta for very negative eta
                    if w == 0.0 {
                        eta
                    } else {
                        math::log1mexp(-w)
                    }
                } else {
                    -w
                }
            }
            LinkFunction::Logit => {
                // -softplus(-eta) for y = 1, -softplus(eta) for y = 0
                let x = if y >= 0.5 { -eta } else { eta };
                -(x.max(0.0) + (-x.abs()).exp().ln_1p())
            }
            LinkFunction::Probit => {
                let x = if y >= 0.5 { eta } else { -eta };
                math::norm_cdf(x.clamp(-37.0, 37.0)).ln()
            }
        }
    }

    /// First derivative of the Bernoulli log-likelihood in `eta`.
    pub fn bernoulli_score(self, y: f64, eta: f64) -> f64 {
        match self {
            LinkFunction::Logit => y - self.inverse(eta),
            LinkFunction::Cloglog => {
                let w = eta.exp();
                if y >= 0.5 {
                    // w / (e^w - 1); underflows cleanly for large w
                    if w > 35.0 {
                        w * (-w).exp()
                    } else {
                        w / w.exp_m1()
                    }
                } else {
                    -w
                }
            }
            LinkFunction::Probit => {
                let x = eta.clamp(-37.0, 37.0);
                if y >= 0.5 {
                    math::norm_pdf(x) / math::norm_cdf(x)
                } else {
                    -math::norm_pdf(x) / math::norm_cdf(-x)
                }
            }
        }
    }

    /// Observed negative second derivative of the Bernoulli log-likelihood
    /// in `eta` (positive for all three links in exact arithmetic).
    pub fn bernoulli_curvature(self, y: f64, eta: f64) -> f64 {
        match self {
            LinkFunction::Logit => {
                let mu = self.inverse(eta);
                mu * (1.0 - mu)
            }
            LinkFunction::Cloglog => {
                let w = eta.exp();
                if y >= 0.5 {
                    if w < 1e-3 {
                        // series of w(e^w(w-1)+1)/(e^w-1)^2 around 0
                        0.5 * w - w * w / 6.0
                    } else {
                        let em = (-w).exp();
                        let a = 1.0 - em;
                        w * em * (w - 1.0 + em) / (a * a)
                    }
                } else {
                    w
                }
            }
            LinkFunction::Probit => {
                let x = eta.clamp(-37.0, 37.0);
                let s = self.bernoulli_score(y, eta);
                s * s + x * s
            }
        }
    }

    /// Expected information (Fisher weight) of a Bernoulli response in
    /// `eta`; used as a positive-definite fallback when the observed
    /// curvature degenerates in floating point.
    pub fn bernoulli_fisher(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Logit => {
                let mu = self.inverse(eta);
                mu * (1.0 - mu)
            }
            LinkFunction::Cloglog => {
                // (d mu/d eta)^2 / (mu (1-mu)) = w^2 / (e^w - 1)
                let w = eta.exp();
                if w > 35.0 {
                    w * w * (-w).exp()
                } else {
                    w * w / w.exp_m1()
                }
            }
            LinkFunction::Probit => {
                let x = eta.clamp(-37.0, 37.0);
                let d = math::norm_pdf(x);
                let mu = self.inverse(eta);
                d * d / (mu * (1.0 - mu))
            }
        }
    }
}

/// Per-transition success probabilities `delta_c in (0,1)`, one per
/// transition of a scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialProbs(Vec<f64>);

impl SequentialProbs {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::invalid("need at least one transition probability"));
        }
        for (c, &d) in delta.iter().enumerate() {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::invalid(format!(
                    "transition probability delta_{} = {d} outside (0,1)",
                    c + 1
                )));
            }
        }
        Ok(SequentialProbs(delta))
    }

    /// Apply the clamped inverse link to a vector of linear predictors.
    pub fn from_linear_predictors(etas: &[f64], link: LinkFunction) -> Result<Self> {
        Self::new(etas.iter().map(|&e| link.inverse(e)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn transitions(&self) -> usize {
        self.0.len()
    }
}

/// A full category distribution: `C` probabilities in [0,1] summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryProbs(Vec<f64>);

impl CategoryProbs {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.len() < 2 {
            return Err(Error::invalid("need at least two category probabilities"));
        }
        if pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("category probability outside [0,1]"));
        }
        let sum: f64 = pi.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "category probabilities sum to {sum}, not 1"
            )));
        }
        Ok(CategoryProbs(pi))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn categories(&self) -> usize {
        self.0.len()
    }
}

/// Telescoping product mapping sequential to category probabilities:
/// `pi_c = delta_c * prod_{m<c}(1-delta_m)` and `pi_C` the survivor product.
pub fn sequential_to_category_probs(delta: &SequentialProbs) -> CategoryProbs {
    let q = delta.transitions();
    let mut pi = Vec::with_capacity(q + 1);
    let mut survive = 1.0;
    for &d in delta.as_slice() {
        pi.push(d * survive);
        survive *= 1.0 - d;
    }
    pi.push(survive);
    CategoryProbs(pi)
}

/// Expand a score into its binary transition outcomes: `zeta = min(z, q)`
/// entries, all zero except a one at transition `z` when `z <= q`.
pub fn expand_observation(z: usize, scale: &OrdinalScale) -> Result<Vec<u8>> {
    let c = scale.categories();
    if z < 1 || z > c {
        return Err(Error::invalid(format!(
            "score {z} outside the scale's 1..={c}"
        )));
    }
    let zeta = z.min(scale.transitions());
    let mut y = vec![0u8; zeta];
    if z <= scale.transitions() {
        y[z - 1] = 1;
    }
    Ok(y)
}

/// Exact binary-expansion log-likelihood of a single score given the linear
/// predictors of its `min(z, q)` transitions.
pub fn binary_loglik(
    z: usize,
    etas: &[f64],
    link: LinkFunction,
    scale: &OrdinalScale,
) -> Result<f64> {
    let y = expand_observation(z, scale)?;
    if etas.len() != y.len() {
        return Err(Error::dimension(format!(
            "score {z} expands to {} transitions but {} linear predictors were given",
            y.len(),
            etas.len()
        )));
    }
    Ok(y.iter()
        .zip(etas)
        .map(|(&yi, &eta)| link.bernoulli_loglik(f64::from(yi), eta))
        .sum())
}

/// Map cumulative (proportional-hazards) thresholds to sequential ones:
/// `beta_l = log(exp(bcum_l) - exp(bcum_{l-1}))` with `bcum_0 = -inf`,
/// computed as a stable log-diff-exp. Input must be strictly increasing.
pub fn cumulative_to_sequential_thresholds(cum: &[f64]) -> Result<Vec<f64>> {
    if cum.is_empty() {
        return Err(Error::invalid("need at least one threshold"));
    }
    let mut seq = Vec::with_capacity(cum.len());
    seq.push(cum[0]);
    for l in 1..cum.len() {
        if cum[l] <= cum[l - 1] {
            return Err(Error::invalid(format!(
                "cumulative thresholds must be strictly increasing, got {} then {}",
                cum[l - 1],
                cum[l]
            )));
        }
        seq.push(cum[l] + math::log1mexp(cum[l - 1] - cum[l]));
    }
    Ok(seq)
}

/// Inverse map: `bcum_l = log(sum_{m<=l} exp(beta_m))`, a running
/// log-sum-exp. Always strictly increasing.
pub fn sequential_to_cumulative_thresholds(seq: &[f64]) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::invalid("need at least one threshold"));
    }
    let mut cum = Vec::with_capacity(seq.len());
    let mut acc = seq[0];
    cum.push(acc);
    for &b in &seq[1..] {
        acc = math::log_add_exp(acc, b);
        cum.push(acc);
    }
    Ok(cum)
}

/// Proportional-hazards cumulative probability `P(z <= l)` at a global
/// linear effect: `1 - exp(-exp(bcum_l - global))`. `l` is 1-based.
pub fn ph_cumulative_prob(l: usize, cum: &[f64], global_effect: f64) -> Result<f64> {
    if l < 1 || l > cum.len() {
        return Err(Error::invalid(format!(
            "threshold index {l} outside 1..={}",
            cum.len()
        )));
    }
    Ok(-(-(cum[l - 1] - global_effect).exp()).exp_m1())
}

/// A contiguous ordered partition of the categories `1..=C` into `K >= 2`
/// blocks, given by the (1-based) last category of each block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    categories: usize,
    block_ends: Vec<usize>,
}

impl Partition {
    pub fn new(categories: usize, block_ends: Vec<usize>) -> Result<Self> {
        if block_ends.len() < 2 {
            return Err(Error::invalid(
                "a partition needs at least two blocks".to_string(),
            ));
        }
        if block_ends.last() != Some(&categories) {
            return Err(Error::invalid(format!(
                "last block must end at category {categories}"
            )));
        }
        let mut prev = 0usize;
        for &e in &block_ends {
            if e <= prev {
                return Err(Error::invalid(
                    "block ends must be strictly increasing".to_string(),
                ));
            }
            prev = e;
        }
        Ok(Partition {
            categories,
            block_ends,
        })
    }

    pub fn blocks(&self) -> usize {
        self.block_ends.len()
    }

    /// 1-based inclusive category ranges of each block.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.block_ends.len());
        let mut start = 1;
        for &e in &self.block_ends {
            out.push((start, e));
            start = e + 1;
        }
        out
    }
}

/// Collapse a cloglog sequential model onto a coarser partition of its
/// categories. Selecting cumulative thresholds at the interior block
/// boundaries reproduces the coarse model exactly; this is the
/// collapsibility property of the proportional-hazards parameterisation.
/// Returns the collapsed scale (labels joined with '+') and its cumulative
/// thresholds.
pub fn collapse_scale(
    scale: &OrdinalScale,
    partition: &Partition,
    cum: &[f64],
) -> Result<(OrdinalScale, Vec<f64>)> {
    if partition.categories != scale.categories() {
        return Err(Error::dimension(format!(
            "partition covers {} categories but the scale has {}",
            partition.categories,
            scale.categories()
        )));
    }
    if cum.len() != scale.transitions() {
        return Err(Error::dimension(format!(
            "expected {} cumulative thresholds, got {}",
            scale.transitions(),
            cum.len()
        )));
    }
    let ranges = partition.block_ranges();
    let labels = ranges
        .iter()
        .map(|&(a, b)| scale.labels()[a - 1..b].join("+"))
        .collect();
    let collapsed_cum = ranges[..ranges.len() - 1]
        .iter()
        .map(|&(_, end)| cum[end - 1])
        .collect();
    Ok((OrdinalScale::with_labels(labels)?, collapsed_cum))
}

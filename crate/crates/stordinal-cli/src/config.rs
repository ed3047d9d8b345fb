//! The JSON run configuration: one file drives every subcommand.
//!
//! Every model setting has a default matching the reference analysis, so a
//! minimal fit configuration is just observation path, category count, and
//! an output directory.  Defaults: complementary log-log link, space-time
//! variant, `P(sigma > 1/q) = 0.05`, `P(range < 10 km) = 0.05`,
//! `P(cor > 0.5) = 2/3`, coefficient prior variance 1000, knots at observed
//! sites, July 1 reference day, 5 grid points per hyperparameter, 2000
//! posterior draws.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use stordinal::design::{KnotPolicy, ModelSpec, PriorSet, ReferenceDay, Variant};
use stordinal::inference::FitConfig;
use stordinal::ordinal::{LinkFunction, OrdinalScale};
use stordinal::simulate::GroundTruth;
use stordinal::spacetime::PCPrior;
use stordinal::{Error, Result};

/// Top-level run configuration.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Observations CSV path (fit, predict, compare).
    pub observations: Option<PathBuf>,
    /// Control-events CSV path; no control events when absent.
    pub controls: Option<PathBuf>,
    /// Prediction-target CSV path (predict).
    pub grid: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; overridable with `--out`.
    pub out: Option<PathBuf>,
    /// Generating mechanism (simulate).
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of ordinal categories; required to fit.
    pub categories: Option<usize>,
    pub link: Option<LinkFunction>,
    pub variant: Option<Variant>,
    #[serde(default)]
    pub priors: PriorsConfig,
    #[serde(default)]
    pub knots: KnotsConfig,
    pub reference_day: Option<ReferenceDayConfig>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    pub sd: Option<TailConfig>,
    pub range: Option<TailConfig>,
    pub cor: Option<TailConfig>,
    pub coef_variance: Option<f64>,
}

/// A penalised-complexity tail statement: for the sd prior
/// `P(sigma > u) = alpha`, for the range prior `P(range < u) = alpha`, for
/// the correlation prior `P(cor > u) = alpha`.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailConfig {
    pub u: f64,
    pub alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum KnotsConfig {
    /// Deduplicated observation locations, optionally thinned.
    Observed { max_knots: Option<usize> },
    /// An explicit knot list.
    Explicit { points: Vec<(f64, f64)> },
}

impl Default for KnotsConfig {
    fn default() -> Self {
        KnotsConfig::Observed { max_knots: None }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDayConfig {
    pub month: u32,
    pub day: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_grid_points")]
    pub grid_points_per_dim: usize,
    #[serde(default = "default_unit")]
    pub grid_step_scale: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_newton")]
    pub max_newton_iter: usize,
    #[serde(default = "default_nm")]
    pub max_nm_iter: usize,
}

fn default_grid_points() -> usize {
    5
}
fn default_unit() -> f64 {
    1.0
}
fn default_samples() -> usize {
    2000
}
fn default_newton() -> usize {
    100
}
fn default_nm() -> usize {
    400
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            grid_points_per_dim: default_grid_points(),
            grid_step_scale: default_unit(),
            samples: default_samples(),
            max_newton_iter: default_newton(),
            max_nm_iter: default_nm(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))
    }

    /// Resolves the model section into a full specification, applying the
    /// documented defaults for everything left unspecified.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let categories = self.model.categories.ok_or_else(|| {
            Error::invalid("config field model.categories is required to fit")
        })?;
        let scale = OrdinalScale::new(categories)?;
        let link = self.model.link.unwrap_or(LinkFunction::Cloglog);
        let variant = self.model.variant.unwrap_or(Variant::M3);

        let defaults = PriorSet::defaults(&scale);
        let p = &self.model.priors;
        let sd = match p.sd {
            Some(t) => PCPrior::sd(t.u, t.alpha)?,
            None => defaults.sd,
        };
        let range = match p.range {
            Some(t) => PCPrior::range2d(t.u, t.alpha)?,
            None => defaults.range,
        };
        let cor = match p.cor {
            Some(t) => PCPrior::cor1(t.u, t.alpha)?,
            None => defaults.cor,
        };
        let priors = PriorSet::new(sd, range, cor, p.coef_variance.unwrap_or(defaults.coef_variance))?;

        let knot_policy = match &self.model.knots {
            KnotsConfig::Observed { max_knots } => KnotPolicy::Observed {
                max_knots: *max_knots,
            },
            KnotsConfig::Explicit { points } => KnotPolicy::Explicit {
                points: points.clone(),
            },
        };
        let reference_day = match self.model.reference_day {
            Some(r) => ReferenceDay {
                month: r.month,
                day: r.day,
            },
            None => ReferenceDay::default(),
        };

        Ok(ModelSpec {
            scale,
            link,
            variant,
            priors,
            knot_policy,
            reference_day,
        })
    }

    /// Fit settings with the effective seed baked in.
    pub fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            grid_points_per_dim: self.inference.grid_points_per_dim,
            grid_step_scale: self.inference.grid_step_scale,
            samples: self.inference.samples,
            seed,
            max_newton_iter: self.inference.max_newton_iter,
            max_nm_iter: self.inference.max_nm_iter,
            init: None,
        }
    }
}

/// Identifies a (model, data) pairing: the SHA-256 of the canonical model
/// JSON followed by the raw observation and control file bytes.  The seed
/// is deliberately excluded so reruns with a different seed can reuse a fit
/// archive's provenance check.
pub fn config_hash(spec: &ModelSpec, observations: &[u8], controls: &[u8]) -> String {
    let spec_json = serde_json::to_vec(spec).expect("model spec serializes");
    let mut hasher = Sha256::new();
    hasher.update(&spec_json);
    hasher.update(observations);
    hasher.update(controls);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

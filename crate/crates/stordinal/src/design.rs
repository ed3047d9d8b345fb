//! Dataset/model assembly: covariate construction, binary expansion of
//! ordinal scores into a stacked design, the global-effects sign reversal,
//! and the Gompertz growth decomposition of the fitted latent field.
//!
//! Each observation with score `z` contributes `min(z, q)` binary rows.
//! Row `c` carries a cut-dummy indicator in column `c` and negated copies
//! of the observation's global covariates, so that
//! `eta_c = beta_c - x*' beta_global - w*' u` is realized as a plain
//! `X beta + W u` linear predictor.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ordinal::{expand_observation, LinkFunction, OrdinalScale};
use crate::spacetime::{ARParams, KnotSet, PCPrior};

/// Access distances are floored here (1 metre) before the log transform,
/// so sites lying directly on a road or trail stay finite.
pub const MIN_ACCESS_KM: f64 = 0.001;

/// Day-resolution durations are expressed in mean Julian years.
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Number of global covariate columns: ctrl, d, year, forest, log_access.
pub const GLOBAL_COVARIATES: usize = 5;

/// Site habitat classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Habitat {
    Forest,
    Grassland,
}

/// A single scored survey of one species at a site in a given year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub site_id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub year: i32,
    pub species: String,
    pub score: usize,
    pub habitat: Habitat,
    pub access_km: f64,
}

/// A dated targeted control event for one species at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub species: String,
    pub site_id: String,
    pub date: NaiveDate,
}

/// Control covariates of an observation relative to a reference date:
/// `E = 1` and `d` = elapsed years (day resolution) since the most recent
/// control event for the same species at the same site strictly before the
/// reference date; `(0, 0)` when no such event exists, which makes the
/// duration coefficient inactive exactly when the event indicator is off.
pub fn control_covariates(
    obs: &Observation,
    reference: NaiveDate,
    events: &[ControlEvent],
) -> (f64, f64) {
    let last = events
        .iter()
        .filter(|e| e.species == obs.species && e.site_id == obs.site_id && e.date < reference)
        .map(|e| e.date)
        .max();
    match last {
        Some(date) => {
            let days = (reference - date).num_days() as f64;
            (1.0, days / DAYS_PER_YEAR)
        }
        None => (0.0, 0.0),
    }
}

/// Dependence structure of the latent field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Ordinal GLM without random effects.
    M1,
    /// Spatial-only field shared across years.
    M2,
    /// Full separable Matern x AR(1) space-time field.
    M3,
}

/// The hyperparameter priors and the coefficient prior variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub sd: PCPrior,
    pub range: PCPrior,
    pub cor: PCPrior,
    pub coef_variance: f64,
}

impl PriorSet {
    pub fn new(sd: PCPrior, range: PCPrior, cor: PCPrior, coef_variance: f64) -> Result<Self> {
        use crate::spacetime::PCPriorKind;
        if sd.kind != PCPriorKind::Sd {
            return Err(Error::invalid("sd prior must be of kind sd"));
        }
        if range.kind != PCPriorKind::Range2d {
            return Err(Error::invalid("range prior must be of kind range2d"));
        }
        if cor.kind != PCPriorKind::Cor1 {
            return Err(Error::invalid("correlation prior must be of kind cor1"));
        }
        if !(coef_variance > 0.0 && coef_variance.is_finite()) {
            return Err(Error::invalid(format!(
                "coefficient prior variance {coef_variance} must be > 0"
            )));
        }
        Ok(PriorSet {
            sd,
            range,
            cor,
            coef_variance,
        })
    }

    /// Default calibration: `P(sigma > 1/q) = 0.05`, `P(range < 10) = 0.05`,
    /// `P(cor > 0.5) = 2/3`, coefficient variance 1000.
    pub fn defaults(scale: &OrdinalScale) -> Self {
        let q = scale.transitions() as f64;
        PriorSet {
            sd: PCPrior::sd(1.0 / q, 0.05).expect("valid default"),
            range: PCPrior::range2d(10.0, 0.05).expect("valid default"),
            cor: PCPrior::cor1(0.5, 2.0 / 3.0).expect("valid default"),
            coef_variance: 1000.0,
        }
    }
}

/// How the latent-field knots are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotPolicy {
    /// Deduplicated observation locations, optionally thinned to a maximum
    /// count by farthest-point selection.
    Observed { max_knots: Option<usize> },
    /// A fixed list of knot locations.
    Explicit { points: Vec<(f64, f64)> },
}

impl Default for KnotPolicy {
    fn default() -> Self {
        KnotPolicy::Observed { max_knots: None }
    }
}

/// Month and day at which the control covariates are evaluated each year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceDay {
    pub month: u32,
    pub day: u32,
}

impl Default for ReferenceDay {
    /// July 1.
    fn default() -> Self {
        ReferenceDay { month: 7, day: 1 }
    }
}

impl ReferenceDay {
    pub fn for_year(&self, year: i32) -> Result<NaiveDate> {
        NaiveDate::from_ymd_opt(year, self.month, self.day).ok_or_else(|| {
            Error::invalid(format!(
                "reference day {:02}-{:02} does not exist in year {year}",
                self.month, self.day
            ))
        })
    }
}

/// Complete model specification for one species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub scale: OrdinalScale,
    pub link: LinkFunction,
    pub variant: Variant,
    pub priors: PriorSet,
    pub knot_policy: KnotPolicy,
    pub reference_day: ReferenceDay,
}

impl ModelSpec {
    pub fn new(scale: OrdinalScale, link: LinkFunction, variant: Variant) -> Self {
        let priors = PriorSet::defaults(&scale);
        ModelSpec {
            scale,
            link,
            variant,
            priors,
            knot_policy: KnotPolicy::default(),
            reference_day: ReferenceDay::default(),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding; identifies the model
    /// configuration in outputs and archives.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// Binary row provenance: which observation and which transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowRef {
    pub obs: usize,
    /// 1-based transition (cut) index.
    pub transition: usize,
}

/// The expanded binary-response design: response `y`, dense coefficient
/// design `X` (cut dummies then negated globals), and the sparse latent
/// incidence `W` holding one negated entry per row (none for variant M1).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedDesign {
    spec: ModelSpec,
    species: Option<String>,
    y: Vec<f64>,
    x: Vec<f64>,
    w: Vec<Option<(usize, f64)>>,
    rows: Vec<RowRef>,
    n_obs: usize,
    knots: KnotSet,
    years: Vec<i32>,
    year_center: f64,
}

impl ExpandedDesign {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn species(&self) -> Option<&str> {
        self.species.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// Coefficient count `p = q + 5`.
    pub fn n_coef(&self) -> usize {
        self.spec.scale.transitions() + GLOBAL_COVARIATES
    }

    pub fn n_cut(&self) -> usize {
        self.spec.scale.transitions()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let p = self.n_coef();
        &self.x[i * p..(i + 1) * p]
    }

    pub fn w_row(&self, i: usize) -> Option<(usize, f64)> {
        self.w[i]
    }

    pub fn rows(&self) -> &[RowRef] {
        &self.rows
    }

    pub fn knots(&self) -> &KnotSet {
        &self.knots
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn year_center(&self) -> f64 {
        self.year_center
    }

    /// Latent dimension: 0 for M1, `k` for M2, `k * T` for M3.
    pub fn latent_dim(&self) -> usize {
        match self.spec.variant {
            Variant::M1 => 0,
            Variant::M2 => self.knots.len(),
            Variant::M3 => self.knots.len() * self.years.len(),
        }
    }

    /// Index of the latent value for a year index and knot (year-major).
    pub fn latent_index(&self, year_idx: usize, knot: usize) -> Option<usize> {
        match self.spec.variant {
            Variant::M1 => None,
            Variant::M2 => Some(knot),
            Variant::M3 => Some(year_idx * self.knots.len() + knot),
        }
    }

    /// Column labels: `cut_1..cut_q` then the global covariates.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.n_cut()).map(|c| format!("cut_{c}")).collect();
        for g in ["ctrl", "d", "year", "forest", "log_access"] {
            names.push(g.to_string());
        }
        names
    }

    /// `eta = X beta + W u`.
    pub fn linear_predictor(&self, beta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.n_coef() {
            return Err(Error::dimension(format!(
                "beta has {} entries, design has {} coefficients",
                beta.len(),
                self.n_coef()
            )));
        }
        if u.len() != self.latent_dim() {
            return Err(Error::dimension(format!(
                "latent vector has {} entries, design needs {}",
                u.len(),
                self.latent_dim()
            )));
        }
        let mut eta = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_rows() {
            let mut v = 0.0;
            for (xj, bj) in self.x_row(i).iter().zip(beta) {
                v += xj * bj;
            }
            if let Some((l, wt)) = self.w[i] {
                v += wt * u[l];
            }
            eta.push(v);
        }
        Ok(eta)
    }

    /// The equivalent design with the global-effects sign reversal undone:
    /// global covariate columns and latent incidence weights are negated.
    /// Fitting it with negated global coefficients and a negated field
    /// reproduces the original linear predictor exactly.
    pub fn reversed_signs(&self) -> ExpandedDesign {
        let mut out = self.clone();
        let p = self.n_coef();
        let q = self.n_cut();
        for i in 0..self.n_rows() {
            for j in q..p {
                out.x[i * p + j] = -out.x[i * p + j];
            }
            if let Some((l, wt)) = out.w[i] {
                out.w[i] = Some((l, -wt));
            }
        }
        out
    }
}

/// Build the expanded design from observations of a single species.
/// Knots follow the spec's knot policy; years span the full contiguous
/// range between the earliest and latest observed year.
pub fn build_design(
    observations: &[Observation],
    events: &[ControlEvent],
    spec: &ModelSpec,
) -> Result<ExpandedDesign> {
    build_design_with(observations, events, spec, None, None)
}

/// As [`build_design`], with optional explicit knot and year overrides
/// (required when `observations` is empty).
pub fn build_design_with(
    observations: &[Observation],
    events: &[ControlEvent],
    spec: &ModelSpec,
    knots_override: Option<KnotSet>,
    years_override: Option<Vec<i32>>,
) -> Result<ExpandedDesign> {
    let species = validate_observations(observations, spec)?;
    if let Some(species) = &species {
        for (i, e) in events.iter().enumerate() {
            if &e.species == species
                && !observations.iter().any(|o| o.site_id == e.site_id)
            {
                return Err(Error::invalid(format!(
                    "control event {i} references unknown site {:?}",
                    e.site_id
                )));
            }
        }
    }

    let years = match years_override {
        Some(years) => {
            if years.is_empty() {
                return Err(Error::invalid("year override must not be empty"));
            }
            if !years.windows(2).all(|w| w[1] == w[0] + 1) {
                return Err(Error::invalid(
                    "year override must be consecutive ascending years",
                ));
            }
            for o in observations {
                if !years.contains(&o.year) {
                    return Err(Error::invalid(format!(
                        "observation year {} outside the year override",
                        o.year
                    )));
                }
            }
            years
        }
        None => {
            if observations.is_empty() {
                return Err(Error::invalid(
                    "cannot infer years from an empty dataset; pass a year override",
                ));
            }
            let lo = observations.iter().map(|o| o.year).min().unwrap();
            let hi = observations.iter().map(|o| o.year).max().unwrap();
            (lo..=hi).collect()
        }
    };
    let year_center = (years[0] + years[years.len() - 1]) as f64 / 2.0;

    let knots = match knots_override {
        Some(k) => k,
        None => match &spec.knot_policy {
            KnotPolicy::Explicit { points } => KnotSet::new(points.clone())?,
            KnotPolicy::Observed { max_knots } => {
                if observations.is_empty() {
                    return Err(Error::invalid(
                        "cannot infer knots from an empty dataset; pass a knot override",
                    ));
                }
                let locs: Vec<(f64, f64)> =
                    observations.iter().map(|o| (o.x_km, o.y_km)).collect();
                let full = KnotSet::dedup_from(&locs)?;
                match max_knots {
                    Some(m) if *m < full.len() => full.thin_farthest(*m)?,
                    _ => full,
                }
            }
        },
    };

    let q = spec.scale.transitions();
    let p = q + GLOBAL_COVARIATES;
    let n_rows: usize = observations
        .iter()
        .map(|o| o.score.min(q))
        .sum();

    let mut y = Vec::with_capacity(n_rows);
    let mut x = Vec::with_capacity(n_rows * p);
    let mut w = Vec::with_capacity(n_rows);
    let mut rows = Vec::with_capacity(n_rows);

    for (j, obs) in observations.iter().enumerate() {
        let reference = spec.reference_day.for_year(obs.year)?;
        let (e_ctrl, d) = control_covariates(obs, reference, events);
        let t_centered = f64::from(obs.year) - year_center;
        let forest = if obs.habitat == Habitat::Forest { 1.0 } else { 0.0 };
        let log_access = obs.access_km.max(MIN_ACCESS_KM).ln();
        let globals = [e_ctrl, d, t_centered, forest, log_access];

        let year_idx = years.iter().position(|&t| t == obs.year).expect("year in range");
        let knot = knots.nearest((obs.x_km, obs.y_km));
        let latent = match spec.variant {
            Variant::M1 => None,
            Variant::M2 => Some((knot, -1.0)),
            Variant::M3 => Some((year_idx * knots.len() + knot, -1.0)),
        };

        let expanded = expand_observation(obs.score, &spec.scale)?;
        for (c0, &yi) in expanded.iter().enumerate() {
            y.push(f64::from(yi));
            for cut in 0..q {
                x.push(if cut == c0 { 1.0 } else { 0.0 });
            }
            for g in globals {
                x.push(-g);
            }
            w.push(latent);
            rows.push(RowRef {
                obs: j,
                transition: c0 + 1,
            });
        }
    }

    Ok(ExpandedDesign {
        spec: spec.clone(),
        species,
        y,
        x,
        w,
        rows,
        n_obs: observations.len(),
        knots,
        years,
        year_center,
    })
}

fn validate_observations(
    observations: &[Observation],
    spec: &ModelSpec,
) -> Result<Option<String>> {
    let c = spec.scale.categories();
    let mut species: Option<String> = None;
    for (j, o) in observations.iter().enumerate() {
        match &species {
            None => species = Some(o.species.clone()),
            Some(s) if s != &o.species => {
                return Err(Error::invalid(format!(
                    "observation {j} is for species {:?} but the design is for {s:?}; \
                     models are fit per species",
                    o.species
                )));
            }
            _ => {}
        }
        if o.score < 1 || o.score > c {
            return Err(Error::invalid(format!(
                "observation {j} has score {} outside 1..={c}",
                o.score
            )));
        }
        if !(o.x_km.is_finite() && o.y_km.is_finite()) {
            return Err(Error::invalid(format!(
                "observation {j} has non-finite coordinates"
            )));
        }
        if !(o.access_km >= 0.0 && o.access_km.is_finite()) {
            return Err(Error::invalid(format!(
                "observation {j} has invalid access distance {}",
                o.access_km
            )));
        }
        if observations[..j]
            .iter()
            .any(|p| p.site_id == o.site_id && (p.x_km != o.x_km || p.y_km != o.y_km))
        {
            return Err(Error::invalid(format!(
                "site {:?} appears with inconsistent coordinates",
                o.site_id
            )));
        }
    }
    Ok(species)
}

/// Output of [`gompertz_decompose`]: all vectors are year-major of length
/// `k * T`, aligned with the latent field layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthDecomposition {
    /// `log xi(t) = u(t) + nu-dot(t)`.
    pub log_abundance: Vec<f64>,
    /// Accumulated growth `nu-dot(t) = nu(t) + rho nu-dot(t-1)`, zero at t=0.
    pub growth_accum: Vec<f64>,
    /// Covariate-driven intrinsic growth inputs `nu(t)`, zero at t=0.
    pub growth_input: Vec<f64>,
    /// `b = rho - 1`.
    pub density_dependence: f64,
}

/// Decompose an abundance-scale latent field into Gompertz growth terms.
///
/// `latent` holds `k * T` values year-major; `knot_covariates` gives the
/// raw (unnegated) global covariate vector driving growth at each knot and
/// year, dotted with `beta_global` to produce the growth inputs `nu(t)`
/// for `t >= 1` (the initial year starts the recursion with
/// `nu-dot(0) = 0`, so its covariates contribute nothing).
pub fn gompertz_decompose(
    latent: &[f64],
    knot_covariates: &[Vec<f64>],
    beta_global: &[f64],
    ar: &ARParams,
    n_knots: usize,
) -> Result<GrowthDecomposition> {
    if n_knots == 0 {
        return Err(Error::invalid("need at least one knot"));
    }
    if latent.len() != knot_covariates.len() {
        return Err(Error::dimension(format!(
            "latent field has {} values but {} covariate vectors were given",
            latent.len(),
            knot_covariates.len()
        )));
    }
    if latent.len() % n_knots != 0 || latent.is_empty() {
        return Err(Error::dimension(format!(
            "latent length {} is not a positive multiple of {n_knots} knots",
            latent.len()
        )));
    }
    for (i, xk) in knot_covariates.iter().enumerate() {
        if xk.len() != beta_global.len() {
            return Err(Error::dimension(format!(
                "covariate vector {i} has {} entries, beta_global has {}",
                xk.len(),
                beta_global.len()
            )));
        }
    }
    let t_count = latent.len() / n_knots;
    let mut growth_input = vec![0.0; latent.len()];
    for t in 1..t_count {
        for k in 0..n_knots {
            let idx = t * n_knots + k;
            growth_input[idx] = knot_covariates[idx]
                .iter()
                .zip(beta_global)
                .map(|(x, b)| x * b)
                .sum();
        }
    }
    let mut growth_accum = vec![0.0; latent.len()];
    for t in 1..t_count {
        for k in 0..n_knots {
            let idx = t * n_knots + k;
            growth_accum[idx] = growth_input[idx] + ar.rho * growth_accum[idx - n_knots];
        }
    }
    let log_abundance = latent
        .iter()
        .zip(&growth_accum)
        .map(|(u, nd)| u + nd)
        .collect();
    Ok(GrowthDecomposition {
        log_abundance,
        growth_accum,
        growth_input,
        density_dependence: ar.rho - 1.0,
    })
}

/// Map a latent field estimated under the global-effects sign reversal
/// onto the abundance scale: the initial year's sign is flipped while the
/// estimated innovations are carried over unchanged, i.e.
/// `u(0) = -u'(0)` and `u(t) = rho u(t-1) + (u'(t) - rho u'(t-1))`.
pub fn abundance_scale_latent(
    field: &[f64],
    n_knots: usize,
    ar: &ARParams,
) -> Result<Vec<f64>> {
    if n_knots == 0 || field.len() % n_knots != 0 || field.is_empty() {
        return Err(Error::dimension(format!(
            "field length {} is not a positive multiple of {n_knots} knots",
            field.len()
        )));
    }
    let t_count = field.len() / n_knots;
    let mut out = vec![0.0; field.len()];
    for k in 0..n_knots {
        out[k] = -field[k];
    }
    for t in 1..t_count {
        for k in 0..n_knots {
            let idx = t * n_knots + k;
            let innovation = field[idx] - ar.rho * field[idx - n_knots];
            out[idx] = ar.rho * out[idx - n_knots] + innovation;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ordinal::LinkFunction;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn obs(site: &str, x: f64, y: f64, year: i32, score: usize) -> Observation {
        Observation {
            site_id: site.to_string(),
            x_km: x,
            y_km: y,
            year,
            species: "weed".into(),
            score,
            habitat: Habitat::Grassland,
            access_km: 0.5,
        }
    }

    fn event(site: &str, y: i32, m: u32, d: u32) -> ControlEvent {
        ControlEvent {
            species: "weed".into(),
            site_id: site.to_string(),
            date: date(y, m, d),
        }
    }

    #[test]
    fn control_covariates_examples() {
        let o = obs("s1", 0.0, 0.0, 2021, 2);
        // one event a calendar year earlier: d = 365/365.25
        let (e, d) = control_covariates(&o, date(2021, 6, 1), &[event("s1", 2020, 6, 1)]);
        assert_eq!(e, 1.0);
        assert_relative_eq!(d, 1460.0 / 1461.0, max_relative = 1e-15);
        assert!((d - 1.0).abs() < 1e-3);
        // no prior events
        let (e, d) = control_covariates(&o, date(2021, 6, 1), &[]);
        assert_eq!((e, d), (0.0, 0.0));
        // most recent prior event wins: 182 days before the reference
        let evs = vec![event("s1", 2019, 1, 1), event("s1", 2020, 1, 1)];
        let (e, d) = control_covariates(&o, date(2020, 7, 1), &evs);
        assert_eq!(e, 1.0);
        assert_relative_eq!(d, 0.49828884325804246, max_relative = 1e-15);
    }

    #[test]
    fn control_covariates_filters_and_boundaries() {
        let o = obs("s1", 0.0, 0.0, 2021, 2);
        let reference = date(2021, 7, 1);
        // same-day and later events are ignored
        let (e, d) = control_covariates(&o, reference, &[event("s1", 2021, 7, 1)]);
        assert_eq!((e, d), (0.0, 0.0));
        let (e, _) = control_covariates(&o, reference, &[event("s1", 2021, 8, 1)]);
        assert_eq!(e, 0.0);
        // other sites and species do not count
        let (e, _) = control_covariates(&o, reference, &[event("s2", 2020, 7, 1)]);
        assert_eq!(e, 0.0);
        let mut foreign = event("s1", 2020, 7, 1);
        foreign.species = "other".into();
        let (e, _) = control_covariates(&o, reference, &[foreign]);
        assert_eq!(e, 0.0);
        // the day before the reference gives the smallest positive duration
        let (e, d) = control_covariates(&o, reference, &[event("s1", 2021, 6, 30)]);
        assert_eq!(e, 1.0);
        assert_relative_eq!(d, 1.0 / DAYS_PER_YEAR);
    }

    fn spec_c5(variant: Variant) -> ModelSpec {
        ModelSpec::new(
            OrdinalScale::new(5).unwrap(),
            LinkFunction::Cloglog,
            variant,
        )
    }

    #[test]
    fn build_design_row_layout_example() {
        // z=3, C=5: three rows, y=(0,0,1); second row has the e_2 dummy and
        // negated globals [ -E, -d, -t_c, -F, -L ]
        let mut o = obs("s1", 2.0, 3.0, 2020, 3);
        o.habitat = Habitat::Forest;
        o.access_km = 0.2;
        let evs = vec![event("s1", 2020, 1, 1)];
        let design = build_design(&[o], &evs, &spec_c5(Variant::M3)).unwrap();
        assert_eq!(design.n_rows(), 3);
        assert_eq!(design.y(), &[0.0, 0.0, 1.0]);
        let d = 0.49828884325804246;
        let row = design.x_row(1);
        assert_eq!(&row[..4], &[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(row[4], -1.0);
        assert_relative_eq!(row[5], -d, max_relative = 1e-15);
        assert_relative_eq!(row[6], 0.0); // single year centers to zero
        assert_relative_eq!(row[7], -1.0);
        assert_relative_eq!(row[8], -(0.2f64.ln()), max_relative = 1e-15);
        // all three rows share globals and the latent entry
        for i in 0..3 {
            assert_eq!(&design.x_row(i)[4..], &row[4..]);
            assert_eq!(design.w_row(i), Some((0, -1.0)));
            assert_eq!(design.rows()[i], RowRef { obs: 0, transition: i + 1 });
        }
        assert_eq!(
            design.coefficient_names(),
            ["cut_1", "cut_2", "cut_3", "cut_4", "ctrl", "d", "year", "forest", "log_access"]
        );
    }

    #[test]
    fn build_design_top_category_has_all_zero_rows() {
        let design = build_design(&[obs("s1", 0.0, 0.0, 2020, 5)], &[], &spec_c5(Variant::M1))
            .unwrap();
        assert_eq!(design.n_rows(), 4);
        assert_eq!(design.y(), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(design.latent_dim(), 0);
        assert_eq!(design.w_row(0), None);
    }

    #[test]
    fn row_count_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let n = rng.random_range(1..40usize);
            let observations: Vec<Observation> = (0..n)
                .map(|i| {
                    let mut o = obs(
                        &format!("s{i}"),
                        rng.random_range(0.0..10.0),
                        rng.random_range(0.0..10.0),
                        rng.random_range(2018..2022),
                        rng.random_range(1..=5usize),
                    );
                    o.access_km = rng.random_range(0.0..3.0);
                    if rng.random_range(0.0..1.0) < 0.5 {
                        o.habitat = Habitat::Forest;
                    }
                    o
                })
                .collect();
            let design = build_design(&observations, &[], &spec_c5(Variant::M3)).unwrap();
            let expect: usize = observations.iter().map(|o| o.score.min(4)).sum();
            assert_eq!(design.n_rows(), expect);
            assert_eq!(design.rows().len(), expect);
        }
    }

    #[test]
    fn latent_mapping_by_variant_and_shared_sites() {
        // two sites, two years; repeat observations share a latent value
        let observations = vec![
            obs("a", 0.0, 0.0, 2020, 2),
            obs("a", 0.0, 0.0, 2020, 4),
            obs("b", 5.0, 5.0, 2021, 1),
        ];
        let d3 = build_design(&observations, &[], &spec_c5(Variant::M3)).unwrap();
        assert_eq!(d3.knots().len(), 2);
        assert_eq!(d3.years(), &[2020, 2021]);
        assert_eq!(d3.latent_dim(), 4);
        assert_eq!(d3.w_row(0), Some((0, -1.0)));
        // repeat observation at the same site-year: same latent index
        assert_eq!(d3.w_row(2), Some((0, -1.0)));
        // site b in year 2021 -> index 1*2 + 1
        let b_row = d3.n_rows() - 1;
        assert_eq!(d3.w_row(b_row), Some((3, -1.0)));
        let d2 = build_design(&observations, &[], &spec_c5(Variant::M2)).unwrap();
        assert_eq!(d2.latent_dim(), 2);
        assert_eq!(d2.w_row(b_row), Some((1, -1.0)));
        assert_eq!(d2.latent_index(1, 1), Some(1));
        assert_eq!(d3.latent_index(1, 1), Some(3));
    }

    #[test]
    fn year_centering_uses_study_midpoint() {
        let observations = vec![
            obs("a", 0.0, 0.0, 2018, 1),
            obs("b", 1.0, 0.0, 2022, 1),
        ];
        let design = build_design(&observations, &[], &spec_c5(Variant::M1)).unwrap();
        assert_eq!(design.years(), &[2018, 2019, 2020, 2021, 2022]);
        assert_relative_eq!(design.year_center(), 2020.0);
        // year column of the first row: -(2018 - 2020) = 2
        assert_relative_eq!(design.x_row(0)[6], 2.0);
    }

    #[test]
    fn access_distance_is_floored_before_log() {
        let mut o = obs("a", 0.0, 0.0, 2020, 1);
        o.access_km = 0.0;
        let design = build_design(&[o], &[], &spec_c5(Variant::M1)).unwrap();
        assert_relative_eq!(design.x_row(0)[8], -(MIN_ACCESS_KM.ln()));
    }

    #[test]
    fn build_design_rejects_bad_inputs() {
        let spec = spec_c5(Variant::M3);
        // mixed species
        let mut o2 = obs("b", 1.0, 1.0, 2020, 1);
        o2.species = "other".into();
        let err = build_design(&[obs("a", 0.0, 0.0, 2020, 1), o2], &[], &spec).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        // score out of range
        let err = build_design(&[obs("a", 0.0, 0.0, 2020, 6)], &[], &spec).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        let err = build_design(&[obs("a", 0.0, 0.0, 2020, 0)], &[], &spec).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        // control event at an unknown site
        let err =
            build_design(&[obs("a", 0.0, 0.0, 2020, 1)], &[event("zz", 2019, 1, 1)], &spec)
                .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        // inconsistent coordinates for one site id
        let err = build_design(
            &[obs("a", 0.0, 0.0, 2020, 1), obs("a", 1.0, 0.0, 2021, 1)],
            &[],
            &spec,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
        // empty data demands overrides
        assert!(build_design(&[], &[], &spec).is_err());
        let knots = KnotSet::new(vec![(0.0, 0.0)]).unwrap();
        let d = build_design_with(&[], &[], &spec, Some(knots), Some(vec![2020, 2021])).unwrap();
        assert_eq!(d.n_rows(), 0);
        assert_eq!(d.latent_dim(), 2);
        // year override must cover all observations and be contiguous
        assert!(build_design_with(
            &[obs("a", 0.0, 0.0, 2020, 1)],
            &[],
            &spec,
            None,
            Some(vec![2021, 2022])
        )
        .is_err());
        assert!(build_design_with(&[], &[], &spec, None, Some(vec![2020, 2022])).is_err());
    }

    #[test]
    fn knot_policy_thinning_applies() {
        let observations: Vec<Observation> = (0..10)
            .map(|i| obs(&format!("s{i}"), i as f64, 0.0, 2020, 1))
            .collect();
        let mut spec = spec_c5(Variant::M2);
        spec.knot_policy = KnotPolicy::Observed { max_knots: Some(4) };
        let design = build_design(&observations, &[], &spec).unwrap();
        assert_eq!(design.knots().len(), 4);
        spec.knot_policy = KnotPolicy::Explicit {
            points: vec![(0.0, 0.0), (9.0, 0.0)],
        };
        let design = build_design(&observations, &[], &spec).unwrap();
        assert_eq!(design.knots().len(), 2);
        // observations map to the nearest explicit knot
        assert_eq!(design.w_row(0), Some((0, -1.0)));
    }

    #[test]
    fn linear_predictor_reduces_to_cuts() {
        let observations = vec![obs("a", 0.0, 0.0, 2020, 3), obs("b", 1.0, 0.0, 2020, 2)];
        let design = build_design(&observations, &[], &spec_c5(Variant::M3)).unwrap();
        let beta = [0.3, -0.1, 0.8, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let u = vec![0.0; design.latent_dim()];
        let eta = design.linear_predictor(&beta, &u).unwrap();
        for (i, r) in design.rows().iter().enumerate() {
            assert_relative_eq!(eta[i], beta[r.transition - 1]);
        }
        // dimension checks
        assert!(design.linear_predictor(&beta[..8], &u).is_err());
        assert!(design.linear_predictor(&beta, &u[..1]).is_err());
    }

    #[test]
    fn linear_predictor_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let observations: Vec<Observation> = (0..25)
            .map(|i| {
                let mut o = obs(
                    &format!("s{i}"),
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    rng.random_range(2019..2023),
                    rng.random_range(1..=5usize),
                );
                o.access_km = rng.random_range(0.01..3.0);
                if rng.random_range(0.0..1.0) < 0.5 {
                    o.habitat = Habitat::Forest;
                }
                o
            })
            .collect();
        let events: Vec<ControlEvent> = (0..10)
            .map(|i| event(&format!("s{}", i * 2), 2019, 3, 14))
            .collect();
        let spec = spec_c5(Variant::M3);
        let design = build_design(&observations, &events, &spec).unwrap();
        let beta: Vec<f64> = (0..design.n_coef()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..design.latent_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let eta = design.linear_predictor(&beta, &u).unwrap();
        // hand-computed eta_c = beta_c - x*' beta_global - u_latent
        for (i, r) in design.rows().iter().enumerate() {
            let o = &observations[r.obs];
            let reference = spec.reference_day.for_year(o.year).unwrap();
            let (e, d) = control_covariates(o, reference, &events);
            let raw = [
                e,
                d,
                f64::from(o.year) - design.year_center(),
                if o.habitat == Habitat::Forest { 1.0 } else { 0.0 },
                o.access_km.max(MIN_ACCESS_KM).ln(),
            ];
            let global: f64 = raw.iter().zip(&beta[4..]).map(|(a, b)| a * b).sum();
            let year_idx = design.years().iter().position(|&t| t == o.year).unwrap();
            let knot = design.knots().nearest((o.x_km, o.y_km));
            let latent = u[design.latent_index(year_idx, knot).unwrap()];
            let expect = beta[r.transition - 1] - global - latent;
            assert_relative_eq!(eta[i], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn grouped_binary_likelihood_equals_category_probability() {
        use crate::ordinal::binary_loglik;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let observations: Vec<Observation> = (0..30)
            .map(|i| {
                obs(
                    &format!("s{i}"),
                    rng.random_range(0.0..10.0),
                    rng.random_range(0.0..10.0),
                    2020,
                    rng.random_range(1..=5usize),
                )
            })
            .collect();
        let design = build_design(&observations, &[], &spec_c5(Variant::M3)).unwrap();
        let beta: Vec<f64> = (0..design.n_coef()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let u: Vec<f64> = (0..design.latent_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let eta = design.linear_predictor(&beta, &u).unwrap();
        let link = design.spec().link;
        for (j, o) in observations.iter().enumerate() {
            let etas: Vec<f64> = design
                .rows()
                .iter()
                .zip(&eta)
                .filter(|(r, _)| r.obs == j)
                .map(|(_, &e)| e)
                .collect();
            let grouped = binary_loglik(o.score, &etas, link, &design.spec().scale).unwrap();
            // category probability via the sequential product
            let mut pi = 1.0;
            for (c0, &e) in etas.iter().enumerate() {
                let delta = link.inverse(e);
                if o.score == c0 + 1 {
                    pi *= delta;
                } else {
                    pi *= 1.0 - delta;
                }
            }
            assert_relative_eq!(grouped.exp(), pi, max_relative = 1e-12);
        }
    }

    #[test]
    fn sign_reversal_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let observations: Vec<Observation> = (0..15)
            .map(|i| {
                let mut o = obs(
                    &format!("s{i}"),
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..5.0),
                    rng.random_range(2020..2023),
                    rng.random_range(1..=5usize),
                );
                o.access_km = rng.random_range(0.01..2.0);
                o
            })
            .collect();
        let design = build_design(&observations, &[], &spec_c5(Variant::M3)).unwrap();
        let reversed = design.reversed_signs();
        let q = design.n_cut();
        let beta: Vec<f64> = (0..design.n_coef()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..design.latent_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut beta_neg = beta.clone();
        for b in beta_neg.iter_mut().skip(q) {
            *b = -*b;
        }
        let u_neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let eta = design.linear_predictor(&beta, &u).unwrap();
        let eta_rev = reversed.linear_predictor(&beta_neg, &u_neg).unwrap();
        // bitwise identical: negation commutes exactly with IEEE products
        assert_eq!(eta, eta_rev);
        // double reversal restores the original design
        assert_eq!(&reversed.reversed_signs(), &design);
    }

    #[test]
    fn model_spec_hash_is_stable_and_sensitive() {
        let spec = spec_c5(Variant::M3);
        let h1 = spec.hash();
        assert_eq!(h1, spec.clone().hash());
        assert_eq!(h1.len(), 64);
        let mut other = spec.clone();
        other.link = LinkFunction::Logit;
        assert_ne!(h1, other.hash());
        let mut other = spec;
        other.variant = Variant::M2;
        assert_ne!(h1, other.hash());
    }

    #[test]
    fn habitat_and_variant_serde_round_trip() {
        assert_eq!(serde_json::to_string(&Habitat::Forest).unwrap(), "\"forest\"");
        assert_eq!(
            serde_json::from_str::<Habitat>("\"grassland\"").unwrap(),
            Habitat::Grassland
        );
        assert_eq!(serde_json::to_string(&Variant::M3).unwrap(), "\"M3\"");
        let spec = spec_c5(Variant::M3);
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn gompertz_accumulates_constant_growth_geometrically() {
        // nu constant with rho = 0.5: nu-dot = 0, nu, 1.5 nu, 1.75 nu
        let ar = ARParams::new(0.5).unwrap();
        let nu = 0.8;
        let covs: Vec<Vec<f64>> = (0..4).map(|_| vec![nu]).collect();
        let latent = vec![0.0; 4];
        let dec = gompertz_decompose(&latent, &covs, &[1.0], &ar, 1).unwrap();
        let expect = [0.0, nu, 1.5 * nu, 1.75 * nu];
        for (a, e) in dec.growth_accum.iter().zip(&expect) {
            assert_relative_eq!(a, e, max_relative = 1e-15);
        }
        assert_relative_eq!(dec.density_dependence, -0.5);
        // zero growth input: log abundance equals the latent field
        let latent = vec![0.4, -0.2, 0.9, 0.1];
        let zero_covs: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0]).collect();
        let dec = gompertz_decompose(&latent, &zero_covs, &[1.0], &ar, 1).unwrap();
        assert_eq!(dec.log_abundance, latent);
    }

    #[test]
    fn gompertz_residuals_recover_innovations() {
        // simulate u(t) = rho u(t-1) + eps(t) at 3 knots over 8 years and
        // check log xi(t) - rho log xi(t-1) - nu(t) = eps(t)
        let mut rng = ChaCha8Rng::seed_from_u64(2718);
        let (k, t_count) = (3usize, 8usize);
        let ar = ARParams::new(0.7).unwrap();
        let mut latent = vec![0.0; k * t_count];
        let mut eps = vec![0.0; k * t_count];
        for i in 0..k {
            latent[i] = rng.sample::<f64, _>(StandardNormal);
        }
        for t in 1..t_count {
            for i in 0..k {
                let idx = t * k + i;
                eps[idx] = rng.sample::<f64, _>(StandardNormal);
                latent[idx] = ar.rho * latent[idx - k] + eps[idx];
            }
        }
        let covs: Vec<Vec<f64>> = (0..k * t_count)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let beta_global = [0.6, -0.3];
        let dec = gompertz_decompose(&latent, &covs, &beta_global, &ar, k).unwrap();
        for t in 1..t_count {
            for i in 0..k {
                let idx = t * k + i;
                let resid = dec.log_abundance[idx]
                    - ar.rho * dec.log_abundance[idx - k]
                    - dec.growth_input[idx];
                assert_relative_eq!(resid, eps[idx], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gompertz_validates_dimensions() {
        let ar = ARParams::new(0.5).unwrap();
        assert!(gompertz_decompose(&[0.0; 4], &vec![vec![0.0]; 3], &[1.0], &ar, 1).is_err());
        assert!(gompertz_decompose(&[0.0; 4], &vec![vec![0.0]; 4], &[1.0, 2.0], &ar, 1).is_err());
        assert!(gompertz_decompose(&[0.0; 5], &vec![vec![0.0]; 5], &[1.0], &ar, 2).is_err());
        assert!(gompertz_decompose(&[], &[], &[1.0], &ar, 1).is_err());
    }

    #[test]
    fn abundance_scale_flips_initial_year_and_keeps_innovations() {
        let mut rng = ChaCha8Rng::seed_from_u64(515);
        let (k, t_count) = (2usize, 6usize);
        let ar = ARParams::new(0.8).unwrap();
        let field: Vec<f64> = (0..k * t_count)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let out = abundance_scale_latent(&field, k, &ar).unwrap();
        for i in 0..k {
            assert_relative_eq!(out[i], -field[i]);
        }
        for t in 1..t_count {
            for i in 0..k {
                let idx = t * k + i;
                let innov_in = field[idx] - ar.rho * field[idx - k];
                let innov_out = out[idx] - ar.rho * out[idx - k];
                assert_relative_eq!(innov_out, innov_in, epsilon = 1e-12);
            }
        }
        assert!(abundance_scale_latent(&field, 5, &ar).is_err());
    }
}

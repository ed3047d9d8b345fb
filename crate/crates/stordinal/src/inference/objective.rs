//! Negative log joint density of coefficients and latent field values,
//! with analytic gradient and Hessian.
//!
//! The joint objective is
//!
//! ```text
//! f(beta, u) = -sum_i loglik_i(eta_i) + (1/2) beta' beta / v + const_beta
//!            + (1/2) u' Sigma^{-1} u + const_u
//! ```
//!
//! where `eta = X beta + W u`, `v` is the coefficient prior variance and
//! `Sigma` is the latent covariance implied by the hyperparameters.  All
//! normalising constants are carried so that `-f` is the exact log joint
//! density; Laplace marginals computed from it need no correction terms.
//!
//! Each observation row contributes a rank-one Hessian term weighted by the
//! Bernoulli curvature.  Rows whose observed curvature is non-positive or
//! non-finite fall back to the expected (Fisher) information, which is
//! non-negative for every link, so the Hessian of `f` stays positive
//! definite (the Gaussian prior blocks contribute a strictly positive
//! diagonal).

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{ExpandedDesign, Variant};
use crate::error::{Error, Result};
use crate::math::LN_SQRT_2PI;
use crate::spacetime::{build_h, jittered_spd, stationary_cov, ARParams, MaternParams};

/// Hyperparameters of the latent field.
///
/// The Matern pair (marginal standard deviation, spatial range) is always
/// present; the AR(1) coefficient is present only for the space-time
/// variant.  The purely parametric variant carries no hyperparameters at
/// all and is represented by `Option::<Hyperparameters>::None` at call
/// sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub matern: MaternParams,
    pub ar: Option<ARParams>,
}

impl Hyperparameters {
    /// Spatial-only hyperparameters (no temporal coefficient).
    pub fn spatial(matern: MaternParams) -> Self {
        Hyperparameters { matern, ar: None }
    }

    /// Space-time hyperparameters.
    pub fn spacetime(matern: MaternParams, ar: ARParams) -> Self {
        Hyperparameters {
            matern,
            ar: Some(ar),
        }
    }

    /// Number of free hyperparameters (2 without AR, 3 with).
    pub fn dim(&self) -> usize {
        if self.ar.is_some() {
            3
        } else {
            2
        }
    }

    /// Unconstrained internal coordinates: `[ln sigma, ln range]` plus, when
    /// present, the log-odds transform `ln((1 + rho) / (1 - rho))`.
    pub fn internal(&self) -> Vec<f64> {
        let mut phi = vec![self.matern.sigma.ln(), self.matern.range.ln()];
        if let Some(ar) = self.ar {
            phi.push(2.0 * ar.rho.atanh());
        }
        phi
    }

    /// Inverse of [`Hyperparameters::internal`].  `with_ar` selects whether a
    /// third coordinate (AR coefficient) is expected.
    pub fn from_internal(phi: &[f64], with_ar: bool) -> Result<Self> {
        let want = if with_ar { 3 } else { 2 };
        if phi.len() != want {
            return Err(Error::Dimension(format!(
                "expected {want} internal coordinates, got {}",
                phi.len()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "internal hyperparameter coordinates must be finite",
            ));
        }
        let matern = MaternParams::new(phi[0].exp(), phi[1].exp())?;
        let ar = if with_ar {
            Some(ARParams::new((0.5 * phi[2]).tanh())?)
        } else {
            None
        };
        Ok(Hyperparameters { matern, ar })
    }

    /// Log absolute Jacobian determinant of the map from internal
    /// coordinates to natural coordinates, `ln|d(sigma, r, rho)/d(phi)|`.
    ///
    /// Added to prior log densities expressed in natural coordinates when
    /// working on the internal scale.
    pub fn log_jacobian(&self) -> f64 {
        let mut lj = self.matern.sigma.ln() + self.matern.range.ln();
        if let Some(ar) = self.ar {
            lj += ((1.0 - ar.rho * ar.rho) / 2.0).ln();
        }
        lj
    }
}

/// A smooth objective with analytic derivatives, minimised by the Newton
/// mode search and approximated by a Gaussian at its minimum.
pub trait Objective: Sync {
    /// Dimension of the argument vector.
    fn dim(&self) -> usize;

    /// Objective value at `theta`.
    fn value(&self, theta: &DVector<f64>) -> Result<f64>;

    /// Objective value, gradient, and Hessian at `theta`.
    fn value_grad_hess(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

/// Latent covariance implied by a design's variant and hyperparameters:
/// `None` for the purely parametric variant, the spatial Matern Gram matrix
/// for the spatial variant, and the stationary separable space-time
/// covariance otherwise.  The returned matrix carries the defensive
/// diagonal jitter, so it is Cholesky-factorizable.
///
/// Errors when the hyperparameter argument does not match the variant.
pub(crate) fn latent_covariance(
    design: &ExpandedDesign,
    hyper: Option<&Hyperparameters>,
) -> Result<Option<DMatrix<f64>>> {
    match (design.spec().variant, hyper) {
        (Variant::M1, None) => Ok(None),
        (Variant::M1, Some(_)) => Err(Error::invalid(
            "the parametric variant takes no latent hyperparameters",
        )),
        (Variant::M2 | Variant::M3, None) => Err(Error::invalid(
            "latent-field variants require Matern hyperparameters",
        )),
        (Variant::M2, Some(h)) => {
            if h.ar.is_some() {
                return Err(Error::invalid(
                    "the spatial variant takes no AR(1) coefficient",
                ));
            }
            Ok(Some(build_h(design.knots(), &h.matern)?))
        }
        (Variant::M3, Some(h)) => {
            let ar = h.ar.ok_or_else(|| {
                Error::invalid("the space-time variant requires an AR(1) coefficient")
            })?;
            let h_mat = build_h(design.knots(), &h.matern)?;
            let cov = stationary_cov(&h_mat, &ar, design.years().len())?;
            let unit = cov.diagonal().amax();
            Ok(Some(jittered_spd(&cov, unit)?.0))
        }
    }
}

/// One observation row in compact form: the cut index it loads, the five
/// global covariate values (already sign-reversed by the design), and the
/// optional latent entry.
#[derive(Debug, Clone)]
struct CompactRow {
    y: f64,
    cut: usize,
    globals: [f64; 5],
    latent: Option<(usize, f64)>,
}

/// Negative log joint density of `theta = [coefficients; latent values]`
/// for a design at fixed hyperparameters.
///
/// Construction precomputes the latent precision matrix (inverse of the
/// covariance implied by the hyperparameters) and its log determinant, so
/// repeated evaluation during a mode search costs only the likelihood scan
/// plus dense linear algebra in the joint dimension.
pub struct JointModel<'a> {
    design: &'a ExpandedDesign,
    hyper: Option<Hyperparameters>,
    rows: Vec<CompactRow>,
    latent_precision: DMatrix<f64>,
    /// `ln det Sigma` of the latent covariance (0 when there is no field).
    latent_log_det_cov: f64,
}

impl<'a> JointModel<'a> {
    /// Builds the objective.  The hyperparameter argument must match the
    /// design's variant: absent for the parametric variant, spatial-only for
    /// the spatial variant, and with an AR coefficient for space-time.
    pub fn new(design: &'a ExpandedDesign, hyper: Option<&Hyperparameters>) -> Result<Self> {
        let latent_cov = latent_covariance(design, hyper)?;
        let (latent_precision, latent_log_det_cov) = match latent_cov {
            None => (DMatrix::zeros(0, 0), 0.0),
            Some(cov) => {
                debug_assert_eq!(cov.nrows(), design.latent_dim());
                let chol = Cholesky::new(cov).ok_or_else(|| {
                    Error::numerical("latent covariance lost positive definiteness")
                })?;
                let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
                let mut precision = chol.inverse();
                // The triangular-solve inverse can be asymmetric in the last
                // bit; mirror the lower triangle so the Hessian is exactly
                // symmetric.
                for r in 0..precision.nrows() {
                    for c in 0..r {
                        precision[(c, r)] = precision[(r, c)];
                    }
                }
                (precision, log_det)
            }
        };
        let q = design.n_cut();
        let rows = design
            .rows()
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let x = design.x_row(i);
                let mut globals = [0.0; 5];
                globals.copy_from_slice(&x[q..q + 5]);
                CompactRow {
                    y: design.y()[i],
                    cut: row.transition - 1,
                    globals,
                    latent: design.w_row(i),
                }
            })
            .collect();
        Ok(JointModel {
            design,
            hyper: hyper.copied(),
            rows,
            latent_precision,
            latent_log_det_cov,
        })
    }

    pub fn design(&self) -> &ExpandedDesign {
        self.design
    }

    pub fn hyper(&self) -> Option<&Hyperparameters> {
        self.hyper.as_ref()
    }

    fn n_coef(&self) -> usize {
        self.design.n_coef()
    }

    fn latent_dim(&self) -> usize {
        self.design.latent_dim()
    }

    fn coef_variance(&self) -> f64 {
        self.design.spec().priors.coef_variance
    }

    fn eta(&self, row: &CompactRow, theta: &DVector<f64>) -> f64 {
        let p = self.n_coef();
        let q = self.design.n_cut();
        let mut eta = theta[row.cut];
        for (g, xg) in row.globals.iter().enumerate() {
            eta += xg * theta[q + g];
        }
        if let Some((l, w)) = row.latent {
            eta += w * theta[p + l];
        }
        eta
    }

    /// Gaussian prior terms (quadratic forms plus normalising constants)
    /// and their gradient contribution, shared between `value` and
    /// `value_grad_hess`.
    fn prior_value(&self, theta: &DVector<f64>) -> f64 {
        let p = self.n_coef();
        let m = self.latent_dim();
        let v = self.coef_variance();
        let mut f = 0.0;
        for j in 0..p {
            f += 0.5 * theta[j] * theta[j] / v;
        }
        f += p as f64 * (LN_SQRT_2PI + 0.5 * v.ln());
        if m > 0 {
            let u = theta.rows(p, m);
            f += 0.5 * (u.transpose() * &self.latent_precision * u)[(0, 0)];
            f += 0.5 * self.latent_log_det_cov + m as f64 * LN_SQRT_2PI;
        }
        f
    }

    fn check_dim(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "objective expects dimension {}, got {}",
                self.dim(),
                theta.len()
            )));
        }
        Ok(())
    }
}

impl Objective for JointModel<'_> {
    fn dim(&self) -> usize {
        self.n_coef() + self.latent_dim()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_dim(theta)?;
        let link = self.design.spec().link;
        let mut f = self.prior_value(theta);
        for row in &self.rows {
            f -= link.bernoulli_loglik(row.y, self.eta(row, theta));
        }
        if !f.is_finite() {
            return Err(Error::Numerical(
                "objective value is not finite".to_string(),
            ));
        }
        Ok(f)
    }

    fn value_grad_hess(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check_dim(theta)?;
        let link = self.design.spec().link;
        let p = self.n_coef();
        let q = self.design.n_cut();
        let m = self.latent_dim();
        let v = self.coef_variance();
        let dim = p + m;

        let mut f = self.prior_value(theta);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);

        // Prior blocks: diagonal 1/v for coefficients, Sigma^{-1} for the field.
        for j in 0..p {
            grad[j] = theta[j] / v;
            hess[(j, j)] = 1.0 / v;
        }
        if m > 0 {
            let u = theta.rows(p, m).into_owned();
            let pu = &self.latent_precision * &u;
            for l in 0..m {
                grad[p + l] = pu[l];
                for l2 in 0..m {
                    hess[(p + l, p + l2)] = self.latent_precision[(l, l2)];
                }
            }
        }

        // Likelihood scan: each row contributes -score to the gradient along
        // its active columns and a rank-one curvature update.
        let mut nz: Vec<(usize, f64)> = Vec::with_capacity(7);
        for row in &self.rows {
            let eta = self.eta(row, theta);
            f -= link.bernoulli_loglik(row.y, eta);
            let score = link.bernoulli_score(row.y, eta);
            let mut curv = link.bernoulli_curvature(row.y, eta);
            if !curv.is_finite() || curv < 0.0 {
                curv = link.bernoulli_fisher(eta);
            }
            if !curv.is_finite() {
                curv = 0.0;
            }
            nz.clear();
            nz.push((row.cut, 1.0));
            for (g, xg) in row.globals.iter().enumerate() {
                if *xg != 0.0 {
                    nz.push((q + g, *xg));
                }
            }
            if let Some((l, w)) = row.latent {
                nz.push((p + l, w));
            }
            for (i, &(a, va)) in nz.iter().enumerate() {
                grad[a] -= score * va;
                // One product per index pair, mirrored, keeps the Hessian
                // symmetric to the last bit.
                for &(b, vb) in &nz[i..] {
                    let update = curv * va * vb;
                    hess[(a, b)] += update;
                    if a != b {
                        hess[(b, a)] += update;
                    }
                }
            }
        }
        if !f.is_finite() {
            return Err(Error::Numerical(
                "objective value is not finite".to_string(),
            ));
        }
        Ok((f, grad, hess))
    }
}

/// The joint objective with all (or all but one) coefficients pinned to
/// fixed values, leaving only the latent field and optionally a single free
/// coefficient.
///
/// Prior terms for the pinned coordinates are excluded, so `-value` is the
/// exact log of `p(data | beta_fixed, free part) * p(free part)`: with no
/// observations the implied density integrates to one.  Used by the
/// low-dimensional brute-force marginal oracle and by fixed-coefficient
/// mode searches in tests.
pub struct FixedCoefJoint<'m, 'a> {
    model: &'m JointModel<'a>,
    beta: Vec<f64>,
    free_coef: Option<usize>,
}

impl<'m, 'a> FixedCoefJoint<'m, 'a> {
    pub fn new(
        model: &'m JointModel<'a>,
        beta: &[f64],
        free_coef: Option<usize>,
    ) -> Result<Self> {
        if beta.len() != model.n_coef() {
            return Err(Error::Dimension(format!(
                "expected {} fixed coefficients, got {}",
                model.n_coef(),
                beta.len()
            )));
        }
        if let Some(j) = free_coef {
            if j >= model.n_coef() {
                return Err(Error::invalid(format!(
                    "free coefficient index {j} out of range for {} coefficients",
                    model.n_coef()
                )));
            }
        }
        Ok(FixedCoefJoint {
            model,
            beta: beta.to_vec(),
            free_coef,
        })
    }

    fn n_free_coef(&self) -> usize {
        usize::from(self.free_coef.is_some())
    }

    /// Maps a reduced argument to the full `[beta; u]` vector.
    pub fn full_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        let p = self.model.n_coef();
        let m = self.model.latent_dim();
        let k = self.n_free_coef();
        let mut full = DVector::zeros(p + m);
        for j in 0..p {
            full[j] = self.beta[j];
        }
        if let Some(j) = self.free_coef {
            full[j] = theta[0];
        }
        for l in 0..m {
            full[p + l] = theta[k + l];
        }
        full
    }

    /// Reduced index of a full-theta coordinate, if it is free.
    fn reduced_index(&self, full: usize) -> Option<usize> {
        let p = self.model.n_coef();
        let k = self.n_free_coef();
        if full >= p {
            Some(k + (full - p))
        } else if self.free_coef == Some(full) {
            Some(0)
        } else {
            None
        }
    }

    /// Prior constants belonging to the pinned coefficients, subtracted from
    /// the full objective value.
    fn pinned_prior(&self) -> f64 {
        let v = self.model.coef_variance();
        let mut f = 0.0;
        for (j, b) in self.beta.iter().enumerate() {
            if self.free_coef != Some(j) {
                f += 0.5 * b * b / v + LN_SQRT_2PI + 0.5 * v.ln();
            }
        }
        f
    }
}

impl Objective for FixedCoefJoint<'_, '_> {
    fn dim(&self) -> usize {
        self.n_free_coef() + self.model.latent_dim()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "objective expects dimension {}, got {}",
                self.dim(),
                theta.len()
            )));
        }
        Ok(self.model.value(&self.full_theta(theta))? - self.pinned_prior())
    }

    fn value_grad_hess(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "objective expects dimension {}, got {}",
                self.dim(),
                theta.len()
            )));
        }
        let dim = self.dim();
        let (f_full, g_full, h_full) = self.model.value_grad_hess(&self.full_theta(theta))?;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for a_full in 0..g_full.len() {
            let Some(a) = self.reduced_index(a_full) else {
                continue;
            };
            grad[a] = g_full[a_full];
            for b_full in 0..g_full.len() {
                if let Some(b) = self.reduced_index(b_full) {
                    hess[(a, b)] = h_full[(a_full, b_full)];
                }
            }
        }
        Ok((f_full - self.pinned_prior(), grad, hess))
    }
}

/// Negative log joint density with analytic gradient and Hessian at
/// `theta = [coefficients; latent values]`.
///
/// Convenience wrapper over [`JointModel`]; prefer constructing the model
/// once when evaluating repeatedly at the same hyperparameters.
pub fn neg_log_joint(
    design: &ExpandedDesign,
    hyper: Option<&Hyperparameters>,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    JointModel::new(design, hyper)?.value_grad_hess(theta)
}

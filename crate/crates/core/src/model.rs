//! Linear-Gaussian MIMIC model: one latent outcome with several proxy
//! indicators, covariate causes, and a binary sensitive attribute that may
//! act on the latent (`sens_coef`) and directly on indicators (`dif_offsets`).
//!
//! ```text
//! latent     η_i  = βᵀx_i + γ s_i + ζ_i,            ζ_i ~ N(0, ψ)
//! indicator  y_ij = ν_j + λ_j η_i + δ_j s_i + ε_ij,  ε_ij ~ N(0, θ_j)
//! ```
//!
//! The likelihood is conditional on `x` and `s`, so each row is
//! `N(μ_i, Σ)` with `μ_i = ν + λ(βᵀx_i + γ s_i) + δ s_i` and
//! `Σ = ψλλᵀ + diag(θ)`. `λ_0` is pinned to 1 and the structural intercept is 0.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which label of the sensitive column is coded 0 and which is coded 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveCoding {
    pub column: String,
    /// Level coded 0.
    pub reference: String,
    /// Level coded 1.
    pub focal: String,
}

impl SensitiveCoding {
    pub fn new(column: impl Into<String>, reference: impl Into<String>, focal: impl Into<String>) -> Self {
        Self {
            column: column.into(),
            reference: reference.into(),
            focal: focal.into(),
        }
    }

    pub fn code(&self, level: &str) -> Result<f64> {
        if level == self.reference {
            Ok(0.0)
        } else if level == self.focal {
            Ok(1.0)
        } else {
            Err(Error::UnknownLevel(level.to_string()))
        }
    }

    pub fn label(&self, code: f64) -> &str {
        if code == 0.0 {
            &self.reference
        } else {
            &self.focal
        }
    }

    /// The same two levels with the 0/1 codes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            column: self.column.clone(),
            reference: self.focal.clone(),
            focal: self.reference.clone(),
        }
    }
}

impl Default for SensitiveCoding {
    fn default() -> Self {
        Self::new("s", "0", "1")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct MimicModel {
    pub indicator_names: Vec<String>,
    pub covariate_names: Vec<String>,
    /// λ; entry 0 is always 1.
    pub loadings: Vec<f64>,
    /// ν
    pub intercepts: Vec<f64>,
    /// β
    pub struct_coefs: Vec<f64>,
    /// γ
    pub sens_coef: f64,
    /// δ; entries not marked free in `free_mask` must be exactly 0.
    pub dif_offsets: Vec<f64>,
    /// θ
    pub resid_vars: Vec<f64>,
    /// ψ
    pub latent_var: f64,
    /// Which `dif_offsets` entries are free parameters.
    pub free_mask: Vec<bool>,
    /// Indicators that are on a log scale (DIF reads as a percent effect).
    pub log_scale: Vec<bool>,
    pub coding: SensitiveCoding,
}

impl MimicModel {
    /// Unit loadings and variances, zero everything else, all δ constrained.
    pub fn new(indicator_names: Vec<String>, covariate_names: Vec<String>, coding: SensitiveCoding) -> Self {
        let p = indicator_names.len();
        let q = covariate_names.len();
        Self {
            indicator_names,
            covariate_names,
            loadings: vec![1.0; p],
            intercepts: vec![0.0; p],
            struct_coefs: vec![0.0; q],
            sens_coef: 0.0,
            dif_offsets: vec![0.0; p],
            resid_vars: vec![1.0; p],
            latent_var: 1.0,
            free_mask: vec![false; p],
            log_scale: vec![false; p],
            coding,
        }
    }

    /// Model with generated names `y1..yp`, `x1..xq` and the default coding.
    pub fn with_dims(p: usize, q: usize) -> Self {
        Self::new(
            (1..=p).map(|j| format!("y{j}")).collect(),
            (1..=q).map(|m| format!("x{m}")).collect(),
            SensitiveCoding::default(),
        )
    }

    pub fn n_indicators(&self) -> usize {
        self.loadings.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.struct_coefs.len()
    }

    pub fn indicator_index(&self, name: &str) -> Option<usize> {
        self.indicator_names.iter().position(|n| n == name)
    }

    /// Frees δ_j (keeping its current value, normally 0).
    pub fn free_dif(mut self, j: usize) -> Self {
        self.free_mask[j] = true;
        self
    }

    /// Constrains every δ to 0.
    pub fn without_dif(mut self) -> Self {
        self.free_mask.iter_mut().for_each(|f| *f = false);
        self.dif_offsets.iter_mut().for_each(|d| *d = 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.loadings.len();
        let q = self.struct_coefs.len();
        if p < 2 {
            return Err(Error::InvalidModel(format!("need at least 2 indicators, found {p}")));
        }
        let check = |name: &str, len: usize, expected: usize| {
            if len == expected {
                Ok(())
            } else {
                Err(Error::InvalidModel(format!("{name} has length {len}, expected {expected}")))
            }
        };
        check("indicator_names", self.indicator_names.len(), p)?;
        check("covariate_names", self.covariate_names.len(), q)?;
        check("intercepts", self.intercepts.len(), p)?;
        check("dif_offsets", self.dif_offsets.len(), p)?;
        check("resid_vars", self.resid_vars.len(), p)?;
        check("free_mask", self.free_mask.len(), p)?;
        check("log_scale", self.log_scale.len(), p)?;
        if self.loadings[0] != 1.0 {
            return Err(Error::InvalidModel(format!(
                "first loading must be pinned to 1, found {}",
                self.loadings[0]
            )));
        }
        if let Some(j) = self.resid_vars.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidModel(format!(
                "residual variance {j} must be positive, found {}",
                self.resid_vars[j]
            )));
        }
        if !(self.latent_var > 0.0 && self.latent_var.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "latent variance must be positive, found {}",
                self.latent_var
            )));
        }
        for j in 0..p {
            if !self.free_mask[j] && self.dif_offsets[j] != 0.0 {
                return Err(Error::InvalidModel(format!(
                    "dif offset {j} is constrained but equals {}",
                    self.dif_offsets[j]
                )));
            }
        }
        let finite = self
            .loadings
            .iter()
            .chain(&self.intercepts)
            .chain(&self.struct_coefs)
            .chain(&self.dif_offsets)
            .chain(std::iter::once(&self.sens_coef))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidModel("non-finite parameter value".into()));
        }
        Ok(())
    }

    /// `ψλλᵀ + diag(θ)`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let p = self.n_indicators();
        DMatrix::from_fn(p, p, |a, b| {
            let shared = self.latent_var * (self.loadings[a] * self.loadings[b]);
            if a == b {
                shared + self.resid_vars[a]
            } else {
                shared
            }
        })
    }

    /// Structural part of the latent mean, `βᵀx + γs`.
    pub fn latent_mean(&self, x: &[f64], s: f64) -> f64 {
        self.struct_coefs.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + self.sens_coef * s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Read the version first so a mismatch is reported as such rather
        // than as a missing-field error.
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidModel("missing schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: found as u32,
            });
        }
        let doc: ModelDocument = serde_json::from_value(raw)?;
        MimicModel::try_from(doc)
    }
}

/// On-disk layout of [`MimicModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    schema_version: u32,
    indicator_names: Vec<String>,
    covariate_names: Vec<String>,
    loadings: Vec<f64>,
    intercepts: Vec<f64>,
    struct_coefs: Vec<f64>,
    sens_coef: f64,
    dif_offsets: Vec<f64>,
    resid_vars: Vec<f64>,
    latent_var: f64,
    free_mask: Vec<bool>,
    log_scale: Vec<bool>,
    sensitive_coding: SensitiveCoding,
}

impl TryFrom<ModelDocument> for MimicModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: SCHEMA_VERSION,
                found: doc.schema_version,
            });
        }
        let model = MimicModel {
            indicator_names: doc.indicator_names,
            covariate_names: doc.covariate_names,
            loadings: doc.loadings,
            intercepts: doc.intercepts,
            struct_coefs: doc.struct_coefs,
            sens_coef: doc.sens_coef,
            dif_offsets: doc.dif_offsets,
            resid_vars: doc.resid_vars,
            latent_var: doc.latent_var,
            free_mask: doc.free_mask,
            log_scale: doc.log_scale,
            coding: doc.sensitive_coding,
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<MimicModel> for ModelDocument {
    fn from(m: MimicModel) -> Self {
        ModelDocument {
            schema_version: SCHEMA_VERSION,
            indicator_names: m.indicator_names,
            covariate_names: m.covariate_names,
            loadings: m.loadings,
            intercepts: m.intercepts,
            struct_coefs: m.struct_coefs,
            sens_coef: m.sens_coef,
            dif_offsets: m.dif_offsets,
            resid_vars: m.resid_vars,
            latent_var: m.latent_var,
            free_mask: m.free_mask,
            log_scale: m.log_scale,
            sensitive_coding: m.coding,
        }
    }
}

/// Numeric view of the data a model is evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFrame {
    /// n×p indicators.
    pub y: DMatrix<f64>,
    /// n×q covariates.
    pub x: DMatrix<f64>,
    /// Sensitive codes, 0 for the reference level and 1 for the focal level.
    pub s: Vec<f64>,
}

impl ModelFrame {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, s: Vec<f64>) -> Result<Self> {
        let n = y.nrows();
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "covariate rows",
                expected: n,
                found: x.nrows(),
            });
        }
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                context: "sensitive rows",
                expected: n,
                found: s.len(),
            });
        }
        if y.iter().chain(x.iter()).chain(&s).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("missing or non-finite value in model frame".into()));
        }
        Ok(Self { y, x, s })
    }

    pub fn n_rows(&self) -> usize {
        self.y.nrows()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn stack(&self, other: &ModelFrame) -> Result<ModelFrame> {
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(a.nrows() + b.nrows(), a.ncols(), |i, j| {
                if i < a.nrows() {
                    a[(i, j)]
                } else {
                    b[(i - a.nrows(), j)]
                }
            })
        };
        let mut s = self.s.clone();
        s.extend_from_slice(&other.s);
        ModelFrame::new(stack(&self.y, &other.y), stack(&self.x, &other.x), s)
    }

    pub(crate) fn check_against(&self, model: &MimicModel) -> Result<()> {
        if self.y.ncols() != model.n_indicators() {
            return Err(Error::DimensionMismatch {
                context: "indicator columns",
                expected: model.n_indicators(),
                found: self.y.ncols(),
            });
        }
        if self.x.ncols() != model.n_covariates() {
            return Err(Error::DimensionMismatch {
                context: "covariate columns",
                expected: model.n_covariates(),
                found: self.x.ncols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpliedMoments {
    /// n×p conditional means.
    pub cond_mean: DMatrix<f64>,
    /// p×p conditional covariance, shared by every row.
    pub cond_cov: DMatrix<f64>,
}

pub fn implied_moments(model: &MimicModel, covariates: &DMatrix<f64>, sensitive: &[f64]) -> Result<ImpliedMoments> {
    model.validate()?;
    let n = covariates.nrows();
    let p = model.n_indicators();
    if covariates.ncols() != model.n_covariates() {
        return Err(Error::DimensionMismatch {
            context: "covariate columns",
            expected: model.n_covariates(),
            found: covariates.ncols(),
        });
    }
    if sensitive.len() != n {
        return Err(Error::DimensionMismatch {
            context: "sensitive rows",
            expected: n,
            found: sensitive.len(),
        });
    }
    let cond_cov = model.implied_covariance();
    if cond_cov.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let eta = covariates * DVector::from_column_slice(&model.struct_coefs);
    let cond_mean = DMatrix::from_fn(n, p, |i, j| {
        let s = sensitive[i];
        model.intercepts[j] + model.loadings[j] * (eta[i] + model.sens_coef * s) + model.dif_offsets[j] * s
    });
    Ok(ImpliedMoments { cond_mean, cond_cov })
}

/// Centered cross-product sufficient statistics of a [`ModelFrame`].
///
/// With `z_i = (1, x_i, s_i)` the residual sum of squares matrix is a
/// quadratic in the mean coefficients, so the likelihood and its gradient
/// cost O(p²q) per evaluation regardless of n. Columns are centered before
/// accumulation to keep the subtraction well conditioned.
#[derive(Clone, Debug)]
pub struct CrossProducts {
    n: f64,
    p: usize,
    q: usize,
    y_mean: Vec<f64>,
    /// Means of `z` (entry 0 unused).
    z_mean: Vec<f64>,
    /// Σ ỹỹᵀ, p×p.
    yy: DMatrix<f64>,
    /// Σ z̃ỹᵀ, (q+2)×p.
    zy: DMatrix<f64>,
    /// Σ z̃z̃ᵀ, (q+2)×(q+2).
    zz: DMatrix<f64>,
}

impl CrossProducts {
    pub fn new(frame: &ModelFrame) -> Self {
        let n = frame.n_rows();
        let p = frame.y.ncols();
        let q = frame.x.ncols();
        let k = q + 2;
        let nf = n.max(1) as f64;
        let y_mean: Vec<f64> = (0..p).map(|j| frame.y.column(j).sum() / nf).collect();
        let mut z_mean = vec![0.0; k];
        for m in 0..q {
            z_mean[1 + m] = frame.x.column(m).sum() / nf;
        }
        z_mean[q + 1] = frame.s.iter().sum::<f64>() / nf;

        let mut yy = DMatrix::zeros(p, p);
        let mut zy = DMatrix::zeros(k, p);
        let mut zz = DMatrix::zeros(k, k);
        let mut yc = vec![0.0; p];
        let mut zc = vec![0.0; k];
        for i in 0..n {
            for j in 0..p {
                yc[j] = frame.y[(i, j)] - y_mean[j];
            }
            zc[0] = 1.0;
            for m in 0..q {
                zc[1 + m] = frame.x[(i, m)] - z_mean[1 + m];
            }
            zc[q + 1] = frame.s[i] - z_mean[q + 1];
            for b in 0..p {
                for a in 0..p {
                    yy[(a, b)] += yc[a] * yc[b];
                }
                for c in 0..k {
                    zy[(c, b)] += zc[c] * yc[b];
                }
            }
            for d in 0..k {
                for c in 0..k {
                    zz[(c, d)] += zc[c] * zc[d];
                }
            }
        }
        Self {
            n: n as f64,
            p,
            q,
            y_mean,
            z_mean,
            yy,
            zy,
            zz,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n as usize
    }

    /// Mean coefficients for the centered design, p×(q+2).
    fn mean_coefficients(&self, model: &MimicModel) -> DMatrix<f64> {
        let (p, q) = (self.p, self.q);
        let mut pi = DMatrix::zeros(p, q + 2);
        let sbar = self.z_mean[q + 1];
        for j in 0..p {
            let lam = model.loadings[j];
            let mut level = model.intercepts[j] - self.y_mean[j] + lam * model.sens_coef * sbar + model.dif_offsets[j] * sbar;
            for m in 0..q {
                let coef = lam * model.struct_coefs[m];
                pi[(j, 1 + m)] = coef;
                level += coef * self.z_mean[1 + m];
            }
            pi[(j, 0)] = level;
            pi[(j, q + 1)] = lam * model.sens_coef + model.dif_offsets[j];
        }
        pi
    }

    /// Log-likelihood and, if requested, its gradient with respect to every
    /// model quantity (not just the free ones).
    fn evaluate(&self, model: &MimicModel, want_grad: bool) -> Result<(f64, Option<FullGradient>)> {
        let (p, q) = (self.p, self.q);
        if model.n_indicators() != p || model.n_covariates() != q {
            return Err(Error::DimensionMismatch {
                context: "model vs cross products",
                expected: p,
                found: model.n_indicators(),
            });
        }
        let sigma = model.implied_covariance();
        let chol = sigma.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().take(p).map(|d| d.ln()).sum::<f64>();
        let omega = chol.inverse();

        let pi = self.mean_coefficients(model);
        let pzy = &pi * &self.zy;
        let rss = &self.yy - &pzy - pzy.transpose() + &pi * &self.zz * pi.transpose();
        let quad = omega.component_mul(&rss).sum();
        let loglik = -0.5 * (self.n * p as f64 * LN_2PI + self.n * log_det + quad);
        if !loglik.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        if !want_grad {
            return Ok((loglik, None));
        }

        // ∂ℓ/∂Π, then fold the centering shifts back into the slope columns.
        let mut dpi = &omega * (self.zy.transpose() - &pi * &self.zz);
        for c in 1..q + 2 {
            let shift = self.z_mean[c];
            for j in 0..p {
                dpi[(j, c)] += dpi[(j, 0)] * shift;
            }
        }
        let dsigma = (&omega * &rss * &omega - &omega * self.n) * 0.5;

        let lam = DVector::from_column_slice(&model.loadings);
        let dsig_lam = &dsigma * &lam;
        let mut grad = FullGradient {
            loadings: vec![0.0; p],
            intercepts: vec![0.0; p],
            struct_coefs: vec![0.0; q],
            sens_coef: 0.0,
            dif_offsets: vec![0.0; p],
            resid_vars: vec![0.0; p],
            latent_var: lam.dot(&dsig_lam),
        };
        for j in 0..p {
            grad.intercepts[j] = dpi[(j, 0)];
            grad.dif_offsets[j] = dpi[(j, q + 1)];
            grad.resid_vars[j] = dsigma[(j, j)];
            let mut d_lam = 2.0 * model.latent_var * dsig_lam[j] + dpi[(j, q + 1)] * model.sens_coef;
            for m in 0..q {
                d_lam += dpi[(j, 1 + m)] * model.struct_coefs[m];
                grad.struct_coefs[m] += dpi[(j, 1 + m)] * model.loadings[j];
            }
            grad.loadings[j] = d_lam;
            grad.sens_coef += dpi[(j, q + 1)] * model.loadings[j];
        }
        Ok((loglik, Some(grad)))
    }

    pub fn log_likelihood(&self, model: &MimicModel) -> Result<f64> {
        self.evaluate(model, false).map(|(l, _)| l)
    }

    /// Log-likelihood and gradient over the free-parameter vector of `model`.
    pub fn log_likelihood_and_grad(&self, model: &MimicModel) -> Result<(f64, Vec<f64>)> {
        let (ll, full) = self.evaluate(model, true)?;
        let full = full.expect("gradient requested");
        Ok((ll, ParamLayout::of(model).project_gradient(model, &full)))
    }
}

struct FullGradient {
    loadings: Vec<f64>,
    intercepts: Vec<f64>,
    struct_coefs: Vec<f64>,
    sens_coef: f64,
    dif_offsets: Vec<f64>,
    resid_vars: Vec<f64>,
    latent_var: f64,
}

/// Ordering of the free-parameter vector:
/// `λ_2..λ_p, ν_1..ν_p, β_1..β_q, γ, free δ_j, ln θ_1..ln θ_p, ln ψ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    p: usize,
    q: usize,
    free_dif: Vec<usize>,
}

impl ParamLayout {
    pub fn of(model: &MimicModel) -> Self {
        Self {
            p: model.n_indicators(),
            q: model.n_covariates(),
            free_dif: (0..model.n_indicators()).filter(|&j| model.free_mask[j]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        (self.p - 1) + self.p + self.q + 1 + self.free_dif.len() + self.p + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 6] {
        let lam = 0;
        let nu = lam + self.p - 1;
        let beta = nu + self.p;
        let gamma = beta + self.q;
        let dif = gamma + 1;
        let theta = dif + self.free_dif.len();
        [nu, beta, gamma, dif, theta, theta + self.p]
    }

    pub fn names(&self, model: &MimicModel) -> Vec<String> {
        let ind = &model.indicator_names;
        let mut out = Vec::with_capacity(self.len());
        out.extend(ind.iter().skip(1).map(|n| format!("loading[{n}]")));
        out.extend(ind.iter().map(|n| format!("intercept[{n}]")));
        out.extend(model.covariate_names.iter().map(|n| format!("struct_coef[{n}]")));
        out.push("sens_coef".to_string());
        out.extend(self.free_dif.iter().map(|&j| format!("dif_offset[{}]", ind[j])));
        out.extend(ind.iter().map(|n| format!("ln_resid_var[{n}]")));
        out.push("ln_latent_var".to_string());
        out
    }

    /// Position of `δ_j` in the parameter vector, if it is free.
    pub fn dif_index(&self, j: usize) -> Option<usize> {
        let [_, _, _, dif, _, _] = self.offsets();
        self.free_dif.iter().position(|&k| k == j).map(|pos| dif + pos)
    }

    pub fn sens_coef_index(&self) -> usize {
        self.offsets()[2]
    }

    pub fn pack(&self, model: &MimicModel) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&model.loadings[1..]);
        v.extend_from_slice(&model.intercepts);
        v.extend_from_slice(&model.struct_coefs);
        v.push(model.sens_coef);
        v.extend(self.free_dif.iter().map(|&j| model.dif_offsets[j]));
        v.extend(model.resid_vars.iter().map(|t| t.ln()));
        v.push(model.latent_var.ln());
        v
    }

    /// Copy of `template` with the free parameters replaced by `values`.
    pub fn unpack(&self, template: &MimicModel, values: &[f64]) -> MimicModel {
        debug_assert_eq!(values.len(), self.len());
        let [nu, beta, gamma, dif, theta, psi] = self.offsets();
        let mut m = template.clone();
        m.loadings[1..].copy_from_slice(&values[..nu]);
        m.intercepts.copy_from_slice(&values[nu..beta]);
        m.struct_coefs.copy_from_slice(&values[beta..gamma]);
        m.sens_coef = values[gamma];
        for (k, &j) in self.free_dif.iter().enumerate() {
            m.dif_offsets[j] = values[dif + k];
        }
        for j in 0..self.p {
            m.resid_vars[j] = values[theta + j].exp();
        }
        m.latent_var = values[psi].exp();
        m
    }

    fn project_gradient(&self, model: &MimicModel, g: &FullGradient) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&g.loadings[1..]);
        v.extend_from_slice(&g.intercepts);
        v.extend_from_slice(&g.struct_coefs);
        v.push(g.sens_coef);
        v.extend(self.free_dif.iter().map(|&j| g.dif_offsets[j]));
        v.extend(g.resid_vars.iter().zip(&model.resid_vars).map(|(d, t)| d * t));
        v.push(g.latent_var * model.latent_var);
        v
    }
}

/// Σᵢ log N(yᵢ; μᵢ, Σ) conditional on covariates and the sensitive attribute.
pub fn log_likelihood(model: &MimicModel, frame: &ModelFrame) -> Result<f64> {
    model.validate()?;
    frame.check_against(model)?;
    CrossProducts::new(frame).log_likelihood(model)
}

/// Gradient of [`log_likelihood`] over the free parameters, laid out by
/// [`ParamLayout`]. Variances are differentiated on the log scale.
pub fn log_likelihood_grad(model: &MimicModel, frame: &ModelFrame) -> Result<Vec<f64>> {
    model.validate()?;
    frame.check_against(model)?;
    CrossProducts::new(frame).log_likelihood_and_grad(model).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_indicator_model() -> MimicModel {
        let mut m = MimicModel::with_dims(2, 1);
        m.loadings = vec![1.0, 0.5];
        m.resid_vars = vec![0.5, 0.5];
        m
    }

    #[test]
    fn implied_covariance_closed_form() {
        let m = two_indicator_model();
        let x = DMatrix::zeros(1, 1);
        let mom = implied_moments(&m, &x, &[0.0]).unwrap();
        assert_eq!(mom.cond_cov, DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 0.75]));
        assert_eq!(mom.cond_mean.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn sensitive_shift_propagates_through_loadings() {
        let mut m = two_indicator_model();
        m.sens_coef = 2.0;
        let x = DMatrix::zeros(1, 1);
        let mom = implied_moments(&m, &x, &[1.0]).unwrap();
        assert_eq!(mom.cond_mean[(0, 0)], 2.0);
        assert_eq!(mom.cond_mean[(0, 1)], 1.0);
    }

    #[test]
    fn density_at_mean_with_identity_covariance() {
        // λ = (1, 0), ψ → contributes only to (0,0); choose θ so Σ = I.
        let mut m = MimicModel::with_dims(2, 0);
        m.loadings = vec![1.0, 0.0];
        m.latent_var = 0.5;
        m.resid_vars = vec![0.5, 1.0];
        let frame = ModelFrame::new(DMatrix::zeros(1, 2), DMatrix::zeros(1, 0), vec![0.0]).unwrap();
        let ll = log_likelihood(&m, &frame).unwrap();
        assert!((ll + LN_2PI).abs() < 1e-14, "{ll}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = two_indicator_model();
        let x = DMatrix::zeros(3, 2);
        assert!(matches!(
            implied_moments(&m, &x, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        let x = DMatrix::zeros(3, 1);
        assert!(matches!(
            implied_moments(&m, &x, &[0.0; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_variances_rejected() {
        let mut m = two_indicator_model();
        m.resid_vars[1] = 0.0;
        assert!(matches!(m.validate(), Err(Error::InvalidModel(_))));
        let mut m = two_indicator_model();
        m.latent_var = -1.0;
        assert!(m.validate().is_err());
        let mut m = two_indicator_model();
        m.loadings[0] = 2.0;
        assert!(m.validate().is_err());
        let mut m = two_indicator_model();
        m.dif_offsets[1] = 0.1;
        assert!(m.validate().is_err());
        m.free_mask[1] = true;
        assert!(m.validate().is_ok());
    }

    #[test]
    fn constrained_dif_contributes_no_coordinate() {
        let m = MimicModel::with_dims(3, 2);
        let base = ParamLayout::of(&m).len();
        let freed = ParamLayout::of(&m.clone().free_dif(2));
        assert_eq!(freed.len(), base + 1);
        assert_eq!(base, 2 + 3 + 2 + 1 + 3 + 1);
        assert!(ParamLayout::of(&m).dif_index(2).is_none());
        assert!(freed.names(&m.clone().free_dif(2)).contains(&"dif_offset[y3]".to_string()));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut m = MimicModel::with_dims(3, 2).free_dif(1);
        m.loadings = vec![1.0, 0.7, -0.4];
        m.intercepts = vec![0.1, 0.2, 0.3];
        m.struct_coefs = vec![0.5, -0.25];
        m.sens_coef = 0.3;
        m.dif_offsets = vec![0.0, 0.2, 0.0];
        m.resid_vars = vec![0.4, 0.9, 1.3];
        m.latent_var = 0.8;
        let layout = ParamLayout::of(&m);
        let v = layout.pack(&m);
        let back = layout.unpack(&MimicModel::with_dims(3, 2).free_dif(1), &v);
        for (a, b) in back.resid_vars.iter().zip(&m.resid_vars) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(back.loadings, m.loadings);
        assert_eq!(back.dif_offsets, m.dif_offsets);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let m = two_indicator_model().free_dif(1);
        let text = m.to_json().unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert!(text.contains("\"sensitive_coding\""));
        assert_eq!(MimicModel::from_json(&text).unwrap(), m);

        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(
            MimicModel::from_json(&bumped),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
        let broken = text.replace("\"latent_var\": 1.0", "\"latent_var\": -1.0");
        assert!(MimicModel::from_json(&broken).is_err());
    }
}

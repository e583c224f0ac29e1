//! Maximum-likelihood fitting, observed information, and likelihood-ratio tests.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::{CrossProducts, MimicModel, ModelFrame, ParamLayout};
use crate::optim::{self, BfgsSettings, Status};

/// A fit only counts as converged when the log-likelihood gradient norm is
/// below this.
pub const CONVERGED_GRAD_NORM: f64 = 1e-5;
/// Observed information evaluated further than this from a stationary point
/// carries a warning.
pub const STATIONARY_GRAD_NORM: f64 = 1e-3;
/// Relative finite-difference step for the observed information.
pub const HESSIAN_STEP: f64 = 1e-4;
pub const WALD_Z: f64 = 1.959_963_984_540_054;

const NEWTON_POLISH_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Gradient-norm stopping tolerance on the log-likelihood.
    pub grad_tol: f64,
    /// Relative log-likelihood change treated as a stall.
    pub rel_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: MimicModel,
    pub loglik: f64,
    pub n_obs: usize,
    /// Names of the free parameters, in [`ParamLayout`] order.
    pub param_names: Vec<String>,
    pub estimates: Vec<f64>,
    /// `sqrt(diag(vcov))`. Absent only for unconverged fits whose
    /// information matrix could not be inverted.
    pub std_errors: Option<Vec<f64>>,
    pub vcov: Option<Vec<Vec<f64>>>,
    pub n_iter: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// SHA-256 of the data the model was fitted on.
    pub data_fingerprint: String,
    /// Log-likelihood at the start and after every accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn n_free(&self) -> usize {
        self.param_names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.param_index(name).map(|i| self.estimates[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        let i = self.param_index(name)?;
        self.std_errors.as_ref().map(|se| se[i])
    }

    /// Wald interval `estimate ± z·SE`.
    pub fn wald_interval(&self, name: &str, z: f64) -> Option<(f64, f64)> {
        let est = self.estimate(name)?;
        let se = self.std_error(name)?;
        Some((est - z * se, est + z * se))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Negative Hessian of the log-likelihood over the free parameters.
#[derive(Clone, Debug)]
pub struct Information {
    /// Symmetrized matrix.
    pub matrix: DMatrix<f64>,
    /// `max|H − Hᵀ| / max|H|` of the raw finite-difference matrix.
    pub asymmetry: f64,
    pub grad_norm: f64,
    /// False when evaluated away from a stationary point.
    pub stationary: bool,
}

impl Information {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let chol = self.matrix.clone().cholesky().ok_or(Error::SingularInformation)?;
        let cov = chol.inverse();
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularInformation);
        }
        Ok(cov)
    }
}

/// SHA-256 over the dimensions and the bit patterns of every value.
pub fn data_fingerprint(frame: &ModelFrame) -> String {
    let mut h = Sha256::new();
    for dim in [frame.n_rows(), frame.y.ncols(), frame.x.ncols()] {
        h.update((dim as u64).to_le_bytes());
    }
    for v in frame.y.iter().chain(frame.x.iter()).chain(&frame.s) {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Deterministic data-driven start: sample means for ν, unit loadings, half
/// the sample variances for θ, half the first indicator's variance for ψ,
/// β from least squares of the first indicator on the covariates, γ = δ = 0.
pub fn starting_values(spec: &MimicModel, frame: &ModelFrame) -> Result<MimicModel> {
    let p = spec.n_indicators();
    let q = spec.n_covariates();
    let n = frame.n_rows();
    let mut m = spec.clone();
    for j in 0..p {
        let col: Vec<f64> = frame.y.column(j).iter().copied().collect();
        let var = sample_variance(&col);
        if !(var > 0.0) {
            return Err(Error::DegenerateData(format!(
                "indicator '{}' has zero variance",
                spec.indicator_names[j]
            )));
        }
        m.intercepts[j] = col.iter().sum::<f64>() / n as f64;
        m.loadings[j] = 1.0;
        m.resid_vars[j] = 0.5 * var;
        if j == 0 {
            m.latent_var = 0.5 * var;
        }
    }
    m.sens_coef = 0.0;
    m.dif_offsets.iter_mut().for_each(|d| *d = 0.0);
    m.struct_coefs = vec![0.0; q];
    if q > 0 {
        let design = DMatrix::from_fn(n, q + 1, |i, c| if c == 0 { 1.0 } else { frame.x[(i, c - 1)] });
        let target = DVector::from_iterator(n, frame.y.column(0).iter().copied());
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * target;
        if let Some(chol) = xtx.cholesky() {
            let coef = chol.solve(&xty);
            m.struct_coefs = coef.iter().skip(1).copied().collect();
        }
    }
    Ok(m)
}

fn check_fit_inputs(spec: &MimicModel, frame: &ModelFrame) -> Result<()> {
    spec.validate()?;
    frame.check_against(spec)?;
    let n_free = ParamLayout::of(spec).len();
    if frame.n_rows() < n_free {
        return Err(Error::DegenerateData(format!(
            "{} rows cannot identify {n_free} free parameters",
            frame.n_rows()
        )));
    }
    Ok(())
}

/// Fits the free parameters of `spec` from the default starting values.
/// Values of constrained parameters are taken from `spec`.
pub fn fit(spec: &MimicModel, frame: &ModelFrame, options: &OptimOptions) -> Result<FitResult> {
    check_fit_inputs(spec, frame)?;
    let start = starting_values(spec, frame)?;
    fit_from(&start, frame, options)
}

/// Fits the free parameters of `start`, starting from its current values.
pub fn fit_from(start: &MimicModel, frame: &ModelFrame, options: &OptimOptions) -> Result<FitResult> {
    check_fit_inputs(start, frame)?;
    for j in 0..start.n_indicators() {
        let col = frame.y.column(j);
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            return Err(Error::DegenerateData(format!(
                "indicator '{}' is constant",
                start.indicator_names[j]
            )));
        }
    }
    let cp = CrossProducts::new(frame);
    let layout = ParamLayout::of(start);
    let n = frame.n_rows() as f64;
    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let m = layout.unpack(start, x);
        let (ll, g) = cp.log_likelihood_and_grad(&m).ok()?;
        Some((-ll / n, g.iter().map(|v| -v / n).collect()))
    };
    let settings = BfgsSettings {
        max_iter: options.max_iter,
        grad_tol: options.grad_tol,
        rel_tol: options.rel_tol,
        stall_grad_tol: CONVERGED_GRAD_NORM,
        grad_scale: n,
    };
    let x0 = layout.pack(start);
    let outcome = optim::minimize(&objective, &x0, &settings)
        .ok_or_else(|| Error::InvalidModel("log-likelihood undefined at the starting values".into()))?;

    let mut x = outcome.x;
    let mut trace: Vec<f64> = outcome.trace.iter().map(|f| -f * n).collect();
    let mut n_iter = outcome.n_iter;
    let mut grad: Vec<f64> = outcome.grad.iter().map(|g| -g * n).collect();
    let mut loglik = -outcome.f * n;
    let budget = options.max_iter.saturating_sub(n_iter).min(NEWTON_POLISH_STEPS);
    if outcome.status != Status::GradientTolerance && norm(&grad) >= options.grad_tol && budget > 0 {
        let polished = newton_polish(&cp, &layout, start, &x, loglik, &grad, options.grad_tol, budget);
        n_iter += polished.steps;
        x = polished.x;
        loglik = polished.loglik;
        grad = polished.grad;
        trace.extend(polished.trace);
    }

    let model = layout.unpack(start, &x);
    let grad_norm = norm(&grad);
    let converged = grad_norm < CONVERGED_GRAD_NORM;
    let info = information_at(&cp, &layout, &model)?;
    let (std_errors, vcov) = match info.covariance() {
        Ok(cov) => (
            Some((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()),
            Some(cov.row_iter().map(|r| r.iter().copied().collect()).collect()),
        ),
        Err(e) if converged => return Err(e),
        Err(_) => (None, None),
    };
    Ok(FitResult {
        param_names: layout.names(&model),
        estimates: x,
        model,
        loglik,
        n_obs: frame.n_rows(),
        std_errors,
        vcov,
        n_iter,
        converged,
        grad_norm,
        data_fingerprint: data_fingerprint(frame),
        trace,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct Polished {
    x: Vec<f64>,
    loglik: f64,
    grad: Vec<f64>,
    steps: usize,
    trace: Vec<f64>,
}

/// Relative roundoff allowed when comparing log-likelihoods near the optimum,
/// where a Newton step's true gain falls below the evaluation noise.
pub const LOGLIK_ROUNDOFF: f64 = 1e-13;

/// Newton steps on the finite-difference information, used when the
/// quasi-Newton run stalls short of the gradient tolerance. A step is kept
/// only if it shrinks the gradient and does not lower the log-likelihood by
/// more than roundoff.
fn newton_polish(
    cp: &CrossProducts,
    layout: &ParamLayout,
    template: &MimicModel,
    x0: &[f64],
    ll0: f64,
    g0: &[f64],
    grad_tol: f64,
    max_steps: usize,
) -> Polished {
    let mut out = Polished {
        x: x0.to_vec(),
        loglik: ll0,
        grad: g0.to_vec(),
        steps: 0,
        trace: Vec::new(),
    };
    for _ in 0..max_steps {
        if norm(&out.grad) < grad_tol {
            break;
        }
        let model = layout.unpack(template, &out.x);
        let Ok(info) = information_at(cp, layout, &model) else {
            break;
        };
        let Some(chol) = info.matrix.clone().cholesky() else {
            break;
        };
        let dir = chol.solve(&DVector::from_column_slice(&out.grad));
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let trial: Vec<f64> = out.x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if let Ok((ll, g)) = cp.log_likelihood_and_grad(&layout.unpack(template, &trial)) {
                let slack = LOGLIK_ROUNDOFF * out.loglik.abs().max(1.0);
                if ll >= out.loglik - slack && norm(&g) < norm(&out.grad) {
                    out.x = trial;
                    out.loglik = ll;
                    out.grad = g;
                    out.trace.push(ll);
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        out.steps += 1;
    }
    out
}

fn information_at(cp: &CrossProducts, layout: &ParamLayout, model: &MimicModel) -> Result<Information> {
    let x = layout.pack(model);
    let (_, g) = cp.log_likelihood_and_grad(model)?;
    let k = x.len();
    let columns: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let h = HESSIAN_STEP * x[c].abs().max(1.0);
            let mut up = x.clone();
            up[c] += h;
            let mut down = x.clone();
            down[c] -= h;
            let (_, gu) = cp.log_likelihood_and_grad(&layout.unpack(model, &up))?;
            let (_, gd) = cp.log_likelihood_and_grad(&layout.unpack(model, &down))?;
            Ok(gu.iter().zip(&gd).map(|(a, b)| -(a - b) / (2.0 * h)).collect())
        })
        .collect::<Result<_>>()?;
    let raw = DMatrix::from_fn(k, k, |r, c| columns[c][r]);
    let scale = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let asymmetry = (&raw - raw.transpose()).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
    let grad_norm = norm(&g);
    Ok(Information {
        matrix: (&raw + raw.transpose()) * 0.5,
        asymmetry,
        grad_norm,
        stationary: grad_norm < STATIONARY_GRAD_NORM,
    })
}

/// Observed information of `model` on `frame`, by central differences of
/// the analytic gradient with step `1e-4 · max(1, |x_k|)`.
pub fn observed_information(model: &MimicModel, frame: &ModelFrame) -> Result<Information> {
    model.validate()?;
    frame.check_against(model)?;
    let cp = CrossProducts::new(frame);
    information_at(&cp, &ParamLayout::of(model), model)
}

/// Likelihood-ratio test of `nested` against `full`, both fitted on the same data.
pub fn lr_test(full: &FitResult, nested: &FitResult) -> Result<LrTestResult> {
    if full.data_fingerprint != nested.data_fingerprint {
        return Err(Error::NotNested("fits were computed on different data".into()));
    }
    if let Some(extra) = nested.param_names.iter().find(|n| !full.param_names.contains(n)) {
        return Err(Error::NotNested(format!("'{extra}' is free only in the nested model")));
    }
    let df = full.n_free() - nested.n_free();
    let statistic = (2.0 * (full.loglik - nested.loglik)).max(0.0);
    let p_value = if df == 0 {
        if full.param_names == nested.param_names {
            1.0
        } else {
            return Err(Error::NotNested("models have the same number of free parameters".into()));
        }
    } else {
        chi_square_sf(statistic, df)
    };
    Ok(LrTestResult {
        statistic,
        df,
        p_value,
    })
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("df is positive");
    dist.sf(statistic).clamp(0.0, 1.0)
}

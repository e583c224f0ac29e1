//! Dense BFGS minimizer with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};

/// Objective value and gradient, or `None` where the objective is undefined.
pub trait Objective {
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn eval(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BfgsSettings {
    pub max_iter: usize,
    /// Stop once `grad_scale · ‖∇f‖` falls below this.
    pub grad_tol: f64,
    /// Relative objective change that counts as stalled ...
    pub rel_tol: f64,
    /// ... but only ends the run once `grad_scale · ‖∇f‖` is below this.
    pub stall_grad_tol: f64,
    /// Factor mapping the objective's gradient norm to the reported one.
    pub grad_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    GradientTolerance,
    RelativeChange,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub n_iter: usize,
    pub status: Status,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LS: usize = 40;

struct Probe {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    slope: f64,
}

fn probe<O: Objective>(obj: &O, x: &[f64], d: &[f64], alpha: f64) -> Option<Probe> {
    let trial: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
    let (f, g) = obj.eval(&trial)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let slope = g.iter().zip(d).map(|(a, b)| a * b).sum();
    Some(Probe { alpha, f, g, slope })
}

/// Strong-Wolfe search along `d`. Falls back to the best point satisfying
/// sufficient decrease if the curvature condition cannot be met.
fn line_search<O: Objective>(obj: &O, x: &[f64], f0: f64, slope0: f64, d: &[f64], alpha0: f64) -> Option<Probe> {
    let armijo = |p: &Probe| p.f <= f0 + C1 * p.alpha * slope0;
    let mut lo = Probe {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        slope: slope0,
    };
    let mut alpha = alpha0;
    let mut hi_alpha = f64::INFINITY;
    let mut hi_f = f64::INFINITY;

    // Bracketing phase.
    for i in 0..MAX_LS {
        match probe(obj, x, d, alpha) {
            None => {
                hi_alpha = alpha;
                hi_f = f64::INFINITY;
                break;
            }
            Some(p) => {
                if !armijo(&p) || (i > 0 && p.f >= lo.f) {
                    hi_alpha = p.alpha;
                    hi_f = p.f;
                    break;
                }
                if p.slope.abs() <= -C2 * slope0 {
                    return Some(p);
                }
                if p.slope >= 0.0 {
                    hi_alpha = lo.alpha;
                    hi_f = lo.f;
                    lo = p;
                    break;
                }
                lo = p;
                alpha *= 2.0;
            }
        }
    }
    if !hi_alpha.is_finite() {
        return (lo.alpha > 0.0).then_some(lo);
    }

    // Zoom phase: quadratic interpolation, safeguarded towards bisection.
    for _ in 0..MAX_LS {
        let width = hi_alpha - lo.alpha;
        let mut a = lo.alpha + 0.5 * width;
        if hi_f.is_finite() {
            let denom = 2.0 * (hi_f - lo.f - lo.slope * width);
            if denom > 0.0 {
                let cand = lo.alpha - lo.slope * width * width / denom;
                let (a_min, a_max) = if width > 0.0 {
                    (lo.alpha + 0.1 * width, hi_alpha - 0.1 * width)
                } else {
                    (hi_alpha - 0.1 * width, lo.alpha + 0.1 * width)
                };
                if cand.is_finite() && cand >= a_min.min(a_max) && cand <= a_min.max(a_max) {
                    a = cand;
                }
            }
        }
        if (a - lo.alpha).abs() < 1e-16 * (1.0 + lo.alpha.abs()) {
            break;
        }
        match probe(obj, x, d, a) {
            None => {
                hi_alpha = a;
                hi_f = f64::INFINITY;
            }
            Some(p) => {
                if !armijo(&p) || p.f >= lo.f {
                    hi_alpha = p.alpha;
                    hi_f = p.f;
                } else {
                    if p.slope.abs() <= -C2 * slope0 {
                        return Some(p);
                    }
                    if p.slope * (hi_alpha - lo.alpha) >= 0.0 {
                        hi_alpha = lo.alpha;
                        hi_f = lo.f;
                    }
                    lo = p;
                }
            }
        }
    }
    (lo.alpha > 0.0 && lo.f < f0).then_some(lo)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimizes `obj` from `x0`. Every accepted step lowers the objective.
///
/// Returns `None` only if the objective is undefined at `x0`.
pub fn minimize<O: Objective>(obj: &O, x0: &[f64], settings: &BfgsSettings) -> Option<BfgsOutcome> {
    let k = x0.len();
    let (mut f, mut g) = obj.eval(x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut x = x0.to_vec();
    let mut h_inv = DMatrix::<f64>::identity(k, k);
    let mut fresh_hessian = true;
    let mut trace = vec![f];
    let mut status = Status::MaxIterations;
    let mut n_iter = 0;

    for iter in 0..settings.max_iter {
        let gnorm = norm(&g) * settings.grad_scale;
        if gnorm < settings.grad_tol {
            status = Status::GradientTolerance;
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (-(&h_inv * &gv)).iter().copied().collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            h_inv = DMatrix::identity(k, k);
            fresh_hessian = true;
            d = g.iter().map(|v| -v).collect();
            slope = -norm(&g).powi(2);
        }
        let alpha0 = if fresh_hessian { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        let step = match line_search(obj, &x, f, slope, &d, alpha0) {
            Some(p) => p,
            None if !fresh_hessian => {
                // Retry once along steepest descent with a reset metric.
                h_inv = DMatrix::identity(k, k);
                fresh_hessian = true;
                continue;
            }
            None => {
                status = Status::LineSearchFailed;
                break;
            }
        };
        n_iter = iter + 1;
        let s: Vec<f64> = d.iter().map(|v| v * step.alpha).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_prev = f;
        x.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        f = step.f;
        g = step.g;
        trace.push(f);

        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-300 {
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            if fresh_hessian {
                let yy = yv.dot(&yv);
                h_inv = DMatrix::identity(k, k) * (sy / yy);
                fresh_hessian = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            // H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ, expanded.
            h_inv += (&sv * sv.transpose()) * (rho * rho * yhy + rho) - (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
        }

        let rel = (f_prev - f).abs() / f_prev.abs().max(f.abs()).max(1e-300);
        if rel < settings.rel_tol && norm(&g) * settings.grad_scale < settings.stall_grad_tol {
            status = Status::RelativeChange;
            break;
        }
    }
    if status == Status::MaxIterations && norm(&g) * settings.grad_scale < settings.grad_tol {
        status = Status::GradientTolerance;
    }
    Some(BfgsOutcome {
        x,
        f,
        grad: g,
        n_iter,
        status,
        trace,
    })
}

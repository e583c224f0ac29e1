//! LASSO feature selection with k-fold cross-validation, and Spearman rank
//! correlation.
//!
//! Features are centered internally but not rescaled, so the penalty acts on
//! the coefficients in the caller's units. Standardize first if the features
//! should be penalized evenly.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LASSO_TOL: f64 = 1e-7;
pub const MAX_SWEEPS: usize = 10_000;
pub const GRID_POINTS: usize = 100;
pub const GRID_RATIO: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
}

/// Centered design with cached column norms.
struct Centered {
    x: DMatrix<f64>,
    y: Vec<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
    /// ‖x_j‖² / n.
    scale: Vec<f64>,
}

impl Centered {
    fn new(features: &DMatrix<f64>, target: &[f64]) -> Result<Self> {
        let (n, q) = features.shape();
        if target.len() != n {
            return Err(Error::DimensionMismatch {
                context: "lasso target",
                expected: n,
                found: target.len(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("lasso needs at least one row".into()));
        }
        if features.iter().chain(target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite lasso input".into()));
        }
        let nf = n as f64;
        let x_mean: Vec<f64> = (0..q).map(|j| features.column(j).sum() / nf).collect();
        let y_mean = target.iter().sum::<f64>() / nf;
        let x = DMatrix::from_fn(n, q, |i, j| features[(i, j)] - x_mean[j]);
        let y = target.iter().map(|v| v - y_mean).collect();
        let scale = (0..q).map(|j| x.column(j).norm_squared() / nf).collect();
        Ok(Self { x, y, x_mean, y_mean, scale })
    }

    fn n(&self) -> f64 {
        self.y.len() as f64
    }

    fn penalty_max(&self) -> f64 {
        (0..self.x.ncols())
            .map(|j| self.x.column(j).iter().zip(&self.y).map(|(a, b)| a * b).sum::<f64>().abs() / self.n())
            .fold(0.0, f64::max)
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let mut r = self.y.clone();
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                r.iter_mut().zip(self.x.column(j).iter()).for_each(|(ri, xi)| *ri -= wj * xi);
            }
        }
        r
    }

    #[cfg(test)]
    fn objective(&self, w: &[f64], penalty: f64) -> f64 {
        let rss: f64 = self.residual(w).iter().map(|v| v * v).sum();
        rss / (2.0 * self.n()) + penalty * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// One cyclic pass; returns the largest coefficient change.
    fn sweep(&self, w: &mut [f64], r: &mut [f64], penalty: f64) -> f64 {
        let n = self.n();
        let mut max_change: f64 = 0.0;
        for j in 0..w.len() {
            if self.scale[j] <= 0.0 {
                continue;
            }
            let col = self.x.column(j);
            let rho = col.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>() / n + self.scale[j] * w[j];
            let updated = soft_threshold(rho, penalty) / self.scale[j];
            let delta = updated - w[j];
            if delta != 0.0 {
                r.iter_mut().zip(col.iter()).for_each(|(ri, xi)| *ri -= delta * xi);
                w[j] = updated;
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    }

    fn solve(&self, penalty: f64, start: &[f64]) -> Result<LassoFit> {
        let mut w = start.to_vec();
        let mut r = self.residual(&w);
        for sweep in 1..=MAX_SWEEPS {
            if self.sweep(&mut w, &mut r, penalty) < LASSO_TOL {
                let intercept = self.y_mean - w.iter().zip(&self.x_mean).map(|(a, b)| a * b).sum::<f64>();
                return Ok(LassoFit {
                    coefficients: w,
                    intercept,
                    sweeps: sweep,
                });
            }
        }
        Err(Error::LassoNoConvergence(MAX_SWEEPS))
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn check_penalty(penalty: f64) -> Result<()> {
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidArgument(format!("penalty must be finite and ≥ 0, got {penalty}")));
    }
    Ok(())
}

/// Minimizes `(1/2n)‖target − intercept − Fw‖² + penalty·‖w‖₁` by cyclic
/// coordinate descent, stopping when no coefficient moves by more than 1e-7.
pub fn lasso_fit(features: &DMatrix<f64>, target: &[f64], penalty: f64) -> Result<LassoFit> {
    check_penalty(penalty)?;
    let c = Centered::new(features, target)?;
    c.solve(penalty, &vec![0.0; features.ncols()])
}

/// Smallest penalty at which every coefficient is zero.
pub fn penalty_max(features: &DMatrix<f64>, target: &[f64]) -> Result<f64> {
    Ok(Centered::new(features, target)?.penalty_max())
}

/// `points` log-spaced penalties from `max` down to `ratio·max`.
pub fn penalty_grid(max: f64, points: usize, ratio: f64) -> Vec<f64> {
    if points == 1 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    (0..points)
        .map(|i| (hi + (lo - hi) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    MinCv,
    OneSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub penalty_grid: Vec<f64>,
    /// One row of q coefficients per grid point, fitted on all rows.
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub cv_mse: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub k_folds: usize,
    pub rule: SelectionRule,
    pub chosen_index: usize,
    pub chosen_penalty: f64,
    pub active_set: Vec<usize>,
}

fn path(c: &Centered, grid: &[f64]) -> Result<Vec<LassoFit>> {
    let mut w = vec![0.0; c.x.ncols()];
    grid.iter()
        .map(|&penalty| {
            let fit = c.solve(penalty, &w)?;
            w.clone_from(&fit.coefficients);
            Ok(fit)
        })
        .collect()
}

/// Fold label per row: rows are shuffled with `seed` and dealt round-robin.
pub fn fold_assignment(n: usize, k_folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % k_folds;
    }
    fold
}

/// K-fold cross-validated LASSO path. Without a grid, the default is 100
/// log-spaced penalties from the full-data penalty_max down to 1e-3 of it.
pub fn cv_select(
    features: &DMatrix<f64>,
    target: &[f64],
    k_folds: usize,
    grid: Option<&[f64]>,
    seed: u64,
    rule: SelectionRule,
) -> Result<LassoPath> {
    let (n, q) = features.shape();
    let full = Centered::new(features, target)?;
    if k_folds < 2 || k_folds > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {k_folds} needs 2 ≤ k ≤ n = {n}"
        )));
    }
    let grid: Vec<f64> = match grid {
        Some(g) => {
            g.iter().try_for_each(|&p| check_penalty(p))?;
            if g.is_empty() || g.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::InvalidArgument("penalty grid must be nonempty and descending".into()));
            }
            g.to_vec()
        }
        None => {
            let max = full.penalty_max();
            if max <= 0.0 {
                return Err(Error::DegenerateData("target is uncorrelated with every feature".into()));
            }
            penalty_grid(max, GRID_POINTS, GRID_RATIO)
        }
    };

    let fold = fold_assignment(n, k_folds, seed);
    let fold_mse: Vec<Vec<f64>> = (0..k_folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
            let xt = features.select_rows(&train);
            let yt: Vec<f64> = train.iter().map(|&i| target[i]).collect();
            let fits = path(&Centered::new(&xt, &yt)?, &grid)?;
            Ok(fits
                .iter()
                .map(|fit| {
                    test.iter()
                        .map(|&i| {
                            let pred = fit.intercept
                                + (0..q).map(|j| fit.coefficients[j] * features[(i, j)]).sum::<f64>();
                            (target[i] - pred).powi(2)
                        })
                        .sum::<f64>()
                        / test.len() as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let kf = k_folds as f64;
    let cv_mse: Vec<f64> = (0..grid.len())
        .map(|g| fold_mse.iter().map(|m| m[g]).sum::<f64>() / kf)
        .collect();
    let cv_se: Vec<f64> = (0..grid.len())
        .map(|g| {
            let var = fold_mse.iter().map(|m| (m[g] - cv_mse[g]).powi(2)).sum::<f64>() / (kf - 1.0);
            (var / kf).sqrt()
        })
        .collect();
    let best = (0..grid.len()).fold(0, |b, g| if cv_mse[g] < cv_mse[b] { g } else { b });
    let chosen_index = match rule {
        SelectionRule::MinCv => best,
        SelectionRule::OneSe => (0..grid.len())
            .find(|&g| cv_mse[g] <= cv_mse[best] + cv_se[best])
            .unwrap_or(best),
    };

    let fits = path(&full, &grid)?;
    let active_set = (0..q).filter(|&j| fits[chosen_index].coefficients[j] != 0.0).collect();
    Ok(LassoPath {
        chosen_penalty: grid[chosen_index],
        penalty_grid: grid,
        intercepts: fits.iter().map(|f| f.intercept).collect(),
        coefficients: fits.into_iter().map(|f| f.coefficients).collect(),
        cv_mse,
        cv_se,
        k_folds,
        rule,
        chosen_index,
        active_set,
    })
}

/// Average ranks, 1-based, with tied values sharing the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman inputs",
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidData("NaN in spearman input".into()));
    }
    pearson(&midranks(a), &midranks(b)).ok_or_else(|| Error::DegenerateData("constant input to spearman".into()))
}

//! Differential item functioning scan.
//!
//! Starting from a fit with every δ constrained to zero, each tested
//! indicator gets its own refit with only that δ freed. The refits start at
//! the base optimum and run in parallel; a failed refit is recorded in its
//! row and does not stop the scan.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{fit, fit_from, lr_test, FitResult, OptimOptions, WALD_Z};
use crate::model::{MimicModel, ModelFrame};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentEffect {
    pub percent: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// `(e^δ − 1)·100`, with the interval endpoints mapped the same way.
pub fn percent_effect(delta: f64, ci: (f64, f64)) -> PercentEffect {
    let pct = |d: f64| d.exp_m1() * 100.0;
    PercentEffect {
        percent: pct(delta),
        ci_low: pct(ci.0),
        ci_high: pct(ci.1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifRow {
    pub indicator: String,
    pub delta: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub lr_statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Present only for log-scale indicators.
    pub percent_effect: Option<PercentEffect>,
    pub flagged_log_scale: bool,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifReport {
    pub sensitive_column: String,
    /// δ is the mean shift of the focal level relative to this one.
    pub reference_level: String,
    pub focal_level: String,
    pub base_loglik: f64,
    pub n_obs: usize,
    pub rows: Vec<DifRow>,
}

impl DifReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table, one line per indicator.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let header = ["Indicator", "δ", "2.5%", "97.5%", "χ²(1)", "p", "pct", "log"].map(String::from);
        let body: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.indicator.clone(),
                    fmt(r.delta),
                    fmt(r.ci_low),
                    fmt(r.ci_high),
                    r.lr_statistic.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                    match r.p_value {
                        Some(p) if p < 0.001 => "<0.001".into(),
                        Some(p) => format!("{p:.3}"),
                        None => "-".into(),
                    },
                    r.percent_effect
                        .map(|e| format!("{:.1}%", e.percent))
                        .unwrap_or_else(|| "-".into()),
                    if r.flagged_log_scale { "yes" } else { "no" }.into(),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!(
            "# δ = mean of '{}' minus '{}' on column '{}', given the latent\n",
            self.focal_level, self.reference_level, self.sensitive_column
        );
        for row in std::iter::once(&header).chain(&body) {
            let mut line = String::new();
            for (c, (cell, w)) in row.iter().zip(widths).enumerate() {
                let pad = w - cell.chars().count();
                if c == 0 {
                    let _ = write!(line, "{cell}{}", " ".repeat(pad));
                } else {
                    let _ = write!(line, "  {}{cell}", " ".repeat(pad));
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn resolve(model: &MimicModel, indicators: &[String]) -> Result<Vec<usize>> {
    if indicators.is_empty() {
        return Ok((0..model.n_indicators()).collect());
    }
    let mut out: Vec<usize> = indicators
        .iter()
        .map(|name| {
            model
                .indicator_index(name)
                .ok_or_else(|| Error::InvalidArgument(format!("'{name}' is not an indicator")))
        })
        .collect::<Result<_>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn scan_row(base: &FitResult, frame: &ModelFrame, j: usize, options: &OptimOptions) -> DifRow {
    let name = base.model.indicator_names[j].clone();
    let log_scale = base.model.log_scale[j];
    let failed = |error: String| DifRow {
        indicator: name.clone(),
        delta: None,
        std_error: None,
        ci_low: None,
        ci_high: None,
        lr_statistic: None,
        p_value: None,
        percent_effect: None,
        flagged_log_scale: log_scale,
        converged: false,
        error: Some(error),
    };
    let full = match fit_from(&base.model.clone().free_dif(j), frame, options) {
        Ok(f) => f,
        Err(e) => return failed(e.to_string()),
    };
    let key = format!("dif_offset[{name}]");
    let delta = full.estimate(&key);
    let se = full.std_error(&key);
    let ci = full.wald_interval(&key, WALD_Z);
    let lr = match lr_test(&full, base) {
        Ok(lr) => lr,
        Err(e) => return failed(e.to_string()),
    };
    DifRow {
        indicator: name,
        delta,
        std_error: se,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        lr_statistic: Some(lr.statistic),
        p_value: Some(lr.p_value),
        percent_effect: match (log_scale, delta, ci) {
            (true, Some(d), Some(ci)) => Some(percent_effect(d, ci)),
            _ => None,
        },
        flagged_log_scale: log_scale,
        converged: full.converged,
        error: (!full.converged).then(|| format!("refit stopped with gradient norm {:.3e}", full.grad_norm)),
    }
}

/// Scans `indicators` (all of them when empty) against an existing base fit
/// that has every δ constrained.
pub fn dif_scan_from_base(
    base: &FitResult,
    frame: &ModelFrame,
    indicators: &[String],
    options: &OptimOptions,
) -> Result<DifReport> {
    if base.model.free_mask.iter().any(|&f| f) {
        return Err(Error::InvalidModel("the base model must constrain every δ to 0".into()));
    }
    if !base.converged {
        return Err(Error::NotConverged(format!(
            "base fit gradient norm {:.3e}",
            base.grad_norm
        )));
    }
    let tested = resolve(&base.model, indicators)?;
    let rows = tested
        .par_iter()
        .map(|&j| scan_row(base, frame, j, options))
        .collect();
    let coding = &base.model.coding;
    Ok(DifReport {
        sensitive_column: coding.column.clone(),
        reference_level: coding.reference.clone(),
        focal_level: coding.focal.clone(),
        base_loglik: base.loglik,
        n_obs: base.n_obs,
        rows,
    })
}

/// Fits `base_spec` with every δ constrained, then scans `indicators`.
pub fn dif_scan(
    base_spec: &MimicModel,
    frame: &ModelFrame,
    indicators: &[String],
    options: &OptimOptions,
) -> Result<DifReport> {
    if base_spec.free_mask.iter().any(|&f| f) {
        return Err(Error::InvalidModel("the base model must constrain every δ to 0".into()));
    }
    let base = fit(base_spec, frame, options)?;
    dif_scan_from_base(&base, frame, indicators, options)
}

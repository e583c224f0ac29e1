//! Seeded synthetic data from a known MIMIC model.
//!
//! Each row draws from its own ChaCha20 stream (`seed`, stream = row index),
//! so the output does not depend on how rows are scheduled across threads.
//! Per row, in order: one uniform for the group, then standard normals for
//! the q covariates, the latent disturbance, and the p measurement errors.
//! Uniforms are `(⌊u64 / 2¹¹⌋ + ½) · 2⁻⁵³`, strictly inside (0, 1). Normals
//! use the cosine branch of Box–Muller on two fresh uniforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Column, ColumnData, Dataset, Role};
use crate::error::{Error, Result};
use crate::model::MimicModel;

pub fn unit_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = unit_uniform(rng);
    let u2 = unit_uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n: usize,
    pub model: MimicModel,
    /// P(s = 1).
    pub group_prop: f64,
    pub seed: u64,
    /// Mean shift added to the covariates of rows with s = 1. Zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_shift: Option<Vec<f64>>,
    /// p×q direct covariate → indicator effects that bypass the latent
    /// (a misspecification knob; zero when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_effects: Option<Vec<Vec<f64>>>,
}

impl SimSpec {
    pub fn new(n: usize, model: MimicModel, group_prop: f64, seed: u64) -> Self {
        Self {
            n,
            model,
            group_prop,
            seed,
            covariate_shift: None,
            direct_effects: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.group_prop > 0.0 && self.group_prop < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "group proportion must be in (0, 1), got {}",
                self.group_prop
            )));
        }
        let (p, q) = (self.model.n_indicators(), self.model.n_covariates());
        if let Some(shift) = &self.covariate_shift {
            if shift.len() != q {
                return Err(Error::DimensionMismatch {
                    context: "covariate_shift",
                    expected: q,
                    found: shift.len(),
                });
            }
        }
        if let Some(direct) = &self.direct_effects {
            if direct.len() != p || direct.iter().any(|r| r.len() != q) {
                return Err(Error::InvalidArgument(format!("direct_effects must be {p}×{q}")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SimSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub data: Dataset,
    /// True latent value per row.
    pub latent: Vec<f64>,
}

struct SimRow {
    s: bool,
    x: Vec<f64>,
    y: Vec<f64>,
    latent: f64,
}

fn draw_row(spec: &SimSpec, row: usize) -> SimRow {
    let m = &spec.model;
    let (p, q) = (m.n_indicators(), m.n_covariates());
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(row as u64);
    rng.set_word_pos(0);

    let s = unit_uniform(&mut rng) < spec.group_prop;
    let sv = if s { 1.0 } else { 0.0 };
    let mut x: Vec<f64> = (0..q).map(|_| standard_normal(&mut rng)).collect();
    if let (Some(shift), true) = (&spec.covariate_shift, s) {
        x.iter_mut().zip(shift).for_each(|(v, d)| *v += d);
    }
    let latent = m.latent_mean(&x, sv) + m.latent_var.sqrt() * standard_normal(&mut rng);
    let y = (0..p)
        .map(|j| {
            let direct: f64 = spec
                .direct_effects
                .as_ref()
                .map(|d| d[j].iter().zip(&x).map(|(a, b)| a * b).sum())
                .unwrap_or(0.0);
            m.intercepts[j]
                + m.loadings[j] * latent
                + m.dif_offsets[j] * sv
                + direct
                + m.resid_vars[j].sqrt() * standard_normal(&mut rng)
        })
        .collect();
    SimRow { s, x, y, latent }
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let m = &spec.model;
    let rows: Vec<SimRow> = (0..spec.n).into_par_iter().map(|i| draw_row(spec, i)).collect();

    let mut columns = Vec::with_capacity(2 + m.n_indicators() + m.n_covariates());
    columns.push(Column {
        name: "row_id".into(),
        role: Role::Id,
        data: ColumnData::Text((0..spec.n).map(|i| i.to_string()).collect()),
    });
    for (j, name) in m.indicator_names.iter().enumerate() {
        columns.push(Column {
            name: name.clone(),
            role: Role::Indicator,
            data: ColumnData::Numeric(rows.iter().map(|r| r.y[j]).collect()),
        });
    }
    for (k, name) in m.covariate_names.iter().enumerate() {
        columns.push(Column {
            name: name.clone(),
            role: Role::Covariate,
            data: ColumnData::Numeric(rows.iter().map(|r| r.x[k]).collect()),
        });
    }
    let coding = &m.coding;
    columns.push(Column {
        name: coding.column.clone(),
        role: Role::Sensitive,
        data: ColumnData::Text(
            rows.iter()
                .map(|r| if r.s { coding.focal.clone() } else { coding.reference.clone() })
                .collect(),
        ),
    });
    let log_scale: Vec<String> = m
        .indicator_names
        .iter()
        .zip(&m.log_scale)
        .filter(|(_, &l)| l)
        .map(|(n, _)| n.clone())
        .collect();
    let levels = [coding.reference.clone(), coding.focal.clone()];
    let data = Dataset::from_columns(columns, None, Some(&levels), &log_scale)?;
    Ok(Simulation {
        data,
        latent: rows.iter().map(|r| r.latent).collect(),
    })
}

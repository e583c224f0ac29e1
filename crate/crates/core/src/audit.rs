//! Fairness diagnostics for decisions and scores.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MimicModel, SensitiveCoding};
use crate::score::{fair_score, naive_score, ScoreKind};
use crate::select::midranks;

/// Per-group rates and the largest pairwise gap between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub rate_by_group: BTreeMap<String, f64>,
    pub n_by_group: BTreeMap<String, usize>,
    pub parity_gap: f64,
    /// Groups whose rate has no denominator (no positive decisions, for PPV).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined_groups: Vec<String>,
}

fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { context, expected, found });
    }
    Ok(())
}

fn check_binary(values: &[u8], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|&d| d > 1) {
        return Err(Error::InvalidData(format!("{what} at row {} is not 0/1", i + 1)));
    }
    Ok(())
}

fn max_gap<'a>(rates: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let hi = rates.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lo = rates.fold(f64::INFINITY, |a, &b| a.min(b));
    if hi.is_finite() { hi - lo } else { 0.0 }
}

/// Selection rate per group. Every declared group must have rows.
pub fn statistical_parity<G: AsRef<str>>(decisions: &[u8], groups: &[G], levels: &[String]) -> Result<ParityReport> {
    check_len("group labels", decisions.len(), groups.len())?;
    check_binary(decisions, "decision")?;
    let mut n_by_group: BTreeMap<String, usize> = levels.iter().map(|l| (l.clone(), 0)).collect();
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    for (d, g) in decisions.iter().zip(groups) {
        let g = g.as_ref();
        *n_by_group
            .get_mut(g)
            .ok_or_else(|| Error::UnknownLevel(g.to_string()))? += 1;
        *hits.entry(g.to_string()).or_default() += usize::from(*d);
    }
    if let Some((g, _)) = n_by_group.iter().find(|(_, &n)| n == 0) {
        return Err(Error::DegenerateData(format!("group '{g}' has no rows")));
    }
    let rate_by_group: BTreeMap<String, f64> = n_by_group
        .iter()
        .map(|(g, &n)| (g.clone(), hits.get(g).copied().unwrap_or(0) as f64 / n as f64))
        .collect();
    Ok(ParityReport {
        parity_gap: max_gap(rate_by_group.values()),
        rate_by_group,
        n_by_group,
        undefined_groups: Vec::new(),
    })
}

/// Positive predictive value per group. Groups without a positive decision
/// are listed in `undefined_groups` and left out of the gap.
pub fn predictive_parity<G: AsRef<str>>(
    decisions: &[u8],
    outcome: &[u8],
    groups: &[G],
    levels: &[String],
) -> Result<ParityReport> {
    check_len("group labels", decisions.len(), groups.len())?;
    check_len("outcomes", decisions.len(), outcome.len())?;
    check_binary(decisions, "decision")?;
    check_binary(outcome, "outcome")?;
    let mut n_by_group: BTreeMap<String, usize> = levels.iter().map(|l| (l.clone(), 0)).collect();
    let mut true_pos: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..decisions.len() {
        let g = groups[i].as_ref();
        let n = n_by_group.get_mut(g).ok_or_else(|| Error::UnknownLevel(g.to_string()))?;
        if decisions[i] == 1 {
            *n += 1;
            *true_pos.entry(g.to_string()).or_default() += usize::from(outcome[i]);
        }
    }
    let mut rate_by_group = BTreeMap::new();
    let mut undefined_groups = Vec::new();
    for (g, &n) in &n_by_group {
        if n == 0 {
            undefined_groups.push(g.clone());
        } else {
            rate_by_group.insert(g.clone(), true_pos.get(g).copied().unwrap_or(0) as f64 / n as f64);
        }
    }
    Ok(ParityReport {
        parity_gap: max_gap(rate_by_group.values()),
        rate_by_group,
        n_by_group,
        undefined_groups,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub bin: usize,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub group: String,
    /// `None` when the bin has no rows of this group.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Proxy means per score-percentile bin and group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalParityCurve {
    pub n_bins: usize,
    pub reference_level: String,
    pub focal_level: String,
    /// Two entries per bin, reference group first.
    pub bins: Vec<CurveBin>,
    /// Focal mean minus reference mean; `None` if either side is empty.
    pub gap_by_bin: Vec<Option<f64>>,
    /// Mean absolute gap over bins with both groups present, weighted by
    /// bin size.
    pub mean_abs_gap: f64,
}

impl ConditionalParityCurve {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin", "percentile_low", "percentile_high", "group", "mean", "count"])?;
        for b in &self.bins {
            w.write_record([
                b.bin.to_string(),
                b.percentile_low.to_string(),
                b.percentile_high.to_string(),
                b.group.clone(),
                b.mean.map(|m| m.to_string()).unwrap_or_default(),
                b.count.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

/// Bin index in `0..n_bins` for each row, from the row's midrank percentile
/// `100·rank/n` in `(0, 100]`.
pub fn percentile_bins(scores: &[f64], n_bins: usize) -> Vec<usize> {
    let n = scores.len() as f64;
    midranks(scores)
        .into_iter()
        .map(|r| {
            let pct = 100.0 * r / n;
            let b = (pct * n_bins as f64 / 100.0).ceil() as usize;
            b.clamp(1, n_bins) - 1
        })
        .collect()
}

/// Rows are bucketed into `n_bins` equal-width score-percentile bins; within
/// each bin the proxy mean is computed per sensitive group (codes 0/1).
pub fn conditional_parity_curve(
    scores: &[f64],
    sensitive: &[f64],
    proxy: &[f64],
    n_bins: usize,
    coding: &SensitiveCoding,
) -> Result<ConditionalParityCurve> {
    check_len("sensitive codes", scores.len(), sensitive.len())?;
    check_len("proxy values", scores.len(), proxy.len())?;
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {n_bins}")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no rows to audit".into()));
    }
    if scores.iter().chain(proxy).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite score or proxy value".into()));
    }
    if let Some(i) = sensitive.iter().position(|&s| s != 0.0 && s != 1.0) {
        return Err(Error::InvalidData(format!("sensitive code at row {} is not 0/1", i + 1)));
    }
    let bin_of = percentile_bins(scores, n_bins);
    let mut sums = vec![[0.0f64; 2]; n_bins];
    let mut counts = vec![[0usize; 2]; n_bins];
    for i in 0..scores.len() {
        let g = sensitive[i] as usize;
        sums[bin_of[i]][g] += proxy[i];
        counts[bin_of[i]][g] += 1;
    }
    let width = 100.0 / n_bins as f64;
    let mut bins = Vec::with_capacity(2 * n_bins);
    let mut gap_by_bin = Vec::with_capacity(n_bins);
    let (mut weighted, mut weight) = (0.0, 0.0);
    for b in 0..n_bins {
        let means: [Option<f64>; 2] =
            std::array::from_fn(|g| (counts[b][g] > 0).then(|| sums[b][g] / counts[b][g] as f64));
        for (g, level) in [&coding.reference, &coding.focal].into_iter().enumerate() {
            bins.push(CurveBin {
                bin: b,
                percentile_low: width * b as f64,
                percentile_high: width * (b + 1) as f64,
                group: level.clone(),
                mean: means[g],
                count: counts[b][g],
            });
        }
        let gap = match means {
            [Some(r), Some(f)] => Some(f - r),
            _ => None,
        };
        if let Some(gap) = gap {
            let w = (counts[b][0] + counts[b][1]) as f64;
            weighted += w * gap.abs();
            weight += w;
        }
        gap_by_bin.push(gap);
    }
    Ok(ConditionalParityCurve {
        n_bins,
        reference_level: coding.reference.clone(),
        focal_level: coding.focal.clone(),
        bins,
        gap_by_bin,
        mean_abs_gap: if weight > 0.0 { weighted / weight } else { f64::NAN },
    })
}

/// Largest change in the chosen score when a row's sensitive value is set
/// to each level in turn.
pub fn counterfactual_check(
    model: &MimicModel,
    covariates: &DMatrix<f64>,
    sensitive: &[f64],
    reference_level: &str,
    kind: ScoreKind,
) -> Result<f64> {
    let n = covariates.nrows();
    check_len("sensitive codes", n, sensitive.len())?;
    let score_at = |code: f64| -> Result<Vec<f64>> {
        let s = vec![code; n];
        match kind {
            ScoreKind::Fair => fair_score(model, covariates, &s, reference_level),
            ScoreKind::Naive => naive_score(model, covariates, &s),
        }
    };
    let (at_reference, at_focal) = (score_at(0.0)?, score_at(1.0)?);
    Ok(at_reference
        .iter()
        .zip(&at_focal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

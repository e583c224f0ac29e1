//! Risk scores from a fitted model and percentile-threshold decisions.
//!
//! The fair score evaluates the structural equation with the sensitive
//! attribute held at the reference level for everyone, so the row's own
//! sensitive value never enters the arithmetic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MimicModel, ModelFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Fair,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub row_ids: Vec<String>,
    pub fair_score: Vec<f64>,
    pub naive_score: Vec<f64>,
    pub decision: Vec<u8>,
    pub decided_on: ScoreKind,
    pub threshold_value: f64,
    pub threshold_percentile: f64,
    pub reference_level: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub decided_on: ScoreKind,
    pub threshold_value: f64,
    pub threshold_percentile: f64,
    pub reference_level: String,
    pub sensitive_column: String,
    /// Level coded 1.
    pub focal_level: String,
    pub n_selected: usize,
}

impl ScoreSet {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row_id", "fair_score", "naive_score", "decision"])?;
        for i in 0..self.row_ids.len() {
            w.write_record([
                self.row_ids[i].clone(),
                self.fair_score[i].to_string(),
                self.naive_score[i].to_string(),
                self.decision[i].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    /// Parses the CSV written by [`ScoreSet::to_csv_string`]. Threshold
    /// metadata is not part of the CSV and comes back as NaN/empty.
    pub fn from_csv_str(text: &str) -> Result<ScoreSet> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != ["row_id", "fair_score", "naive_score", "decision"] {
            return Err(Error::InvalidData(format!("unexpected score header {header:?}")));
        }
        let mut out = ScoreSet {
            row_ids: Vec::new(),
            fair_score: Vec::new(),
            naive_score: Vec::new(),
            decision: Vec::new(),
            decided_on: ScoreKind::Fair,
            threshold_value: f64::NAN,
            threshold_percentile: f64::NAN,
            reference_level: String::new(),
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec.get(c).unwrap_or("").parse().map_err(|_| Error::NonNumeric {
                    row: i + 1,
                    column: header[c].clone(),
                    value: rec.get(c).unwrap_or("").to_string(),
                })
            };
            out.row_ids.push(rec.get(0).unwrap_or("").to_string());
            out.fair_score.push(num(1)?);
            out.naive_score.push(num(2)?);
            let d = num(3)?;
            if d != 0.0 && d != 1.0 {
                return Err(Error::InvalidData(format!("decision at row {} is not 0/1", i + 1)));
            }
            out.decision.push(d as u8);
        }
        Ok(out)
    }

    pub fn summary(&self, model: &MimicModel) -> ScoreSummary {
        ScoreSummary {
            n: self.row_ids.len(),
            decided_on: self.decided_on,
            threshold_value: self.threshold_value,
            threshold_percentile: self.threshold_percentile,
            reference_level: self.reference_level.clone(),
            sensitive_column: model.coding.column.clone(),
            focal_level: if self.reference_level == model.coding.reference {
                model.coding.focal.clone()
            } else {
                model.coding.reference.clone()
            },
            n_selected: self.decision.iter().map(|&d| d as usize).sum(),
        }
    }
}

fn check_covariates(model: &MimicModel, covariates: &DMatrix<f64>, sensitive: &[f64]) -> Result<()> {
    if covariates.ncols() != model.n_covariates() {
        return Err(Error::DimensionMismatch {
            context: "covariate columns",
            expected: model.n_covariates(),
            found: covariates.ncols(),
        });
    }
    if sensitive.len() != covariates.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sensitive rows",
            expected: covariates.nrows(),
            found: sensitive.len(),
        });
    }
    Ok(())
}

fn structural_part(model: &MimicModel, covariates: &DMatrix<f64>) -> Vec<f64> {
    (0..covariates.nrows())
        .map(|i| {
            model
                .struct_coefs
                .iter()
                .enumerate()
                .map(|(m, b)| b * covariates[(i, m)])
                .sum::<f64>()
        })
        .collect()
}

/// `βᵀxᵢ + γ·s_ref` for every row; the row's sensitive value is not read.
pub fn fair_score(model: &MimicModel, covariates: &DMatrix<f64>, sensitive: &[f64], reference_level: &str) -> Result<Vec<f64>> {
    check_covariates(model, covariates, sensitive)?;
    let s_ref = model.coding.code(reference_level)?;
    let shift = model.sens_coef * s_ref;
    Ok(structural_part(model, covariates).into_iter().map(|v| v + shift).collect())
}

/// `βᵀxᵢ + γ·sᵢ`, the sensitive path left open.
pub fn naive_score(model: &MimicModel, covariates: &DMatrix<f64>, sensitive: &[f64]) -> Result<Vec<f64>> {
    check_covariates(model, covariates, sensitive)?;
    Ok(structural_part(model, covariates)
        .into_iter()
        .zip(sensitive)
        .map(|(v, s)| v + model.sens_coef * s)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decisions {
    pub decision: Vec<u8>,
    pub threshold_value: f64,
}

/// Nearest-rank percentile: the smallest sample value with at least
/// `percentile`% of the sample at or below it.
pub fn nearest_rank(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sample".into()));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!("percentile must be in (0, 100), got {percentile}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against products like 0.55·100 landing just above an integer.
    let exact = percentile * sorted.len() as f64 / 100.0;
    let rank = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Decision 1 for scores strictly above the nearest-rank `percentile` of
/// `reference_scores`.
pub fn decide(scores: &[f64], percentile: f64, reference_scores: &[f64]) -> Result<Decisions> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to decide on".into()));
    }
    let threshold_value = nearest_rank(reference_scores, percentile)?;
    Ok(Decisions {
        decision: scores.iter().map(|&s| u8::from(s > threshold_value)).collect(),
        threshold_value,
    })
}

/// Posterior mean of the latent given indicators, covariates and the
/// sensitive attribute (regression factor scores).
pub fn factor_score(model: &MimicModel, frame: &ModelFrame) -> Result<Vec<f64>> {
    model.validate()?;
    frame.check_against(model)?;
    let p = model.n_indicators();
    let precision = 1.0 / model.latent_var
        + (0..p)
            .map(|j| model.loadings[j] * model.loadings[j] / model.resid_vars[j])
            .sum::<f64>();
    if !(precision.is_finite() && precision > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok((0..frame.n_rows())
        .map(|i| {
            let s = frame.s[i];
            let x: Vec<f64> = frame.x.row(i).iter().copied().collect();
            let prior = model.latent_mean(&x, s);
            let evidence: f64 = (0..p)
                .map(|j| {
                    let centered = frame.y[(i, j)] - model.intercepts[j] - model.dif_offsets[j] * s;
                    model.loadings[j] * centered / model.resid_vars[j]
                })
                .sum();
            (prior / model.latent_var + evidence) / precision
        })
        .collect())
}

/// Single-proxy baseline: least squares of `target` on the covariates, and
/// optionally the sensitive attribute. With `condition_on_sensitive` the
/// prediction holds the attribute at `reference_code` for every row.
pub fn proxy_score(
    covariates: &DMatrix<f64>,
    sensitive: &[f64],
    target: &[f64],
    condition_on_sensitive: bool,
    reference_code: f64,
) -> Result<Vec<f64>> {
    let n = covariates.nrows();
    let q = covariates.ncols();
    if target.len() != n || sensitive.len() != n {
        return Err(Error::DimensionMismatch {
            context: "proxy regression rows",
            expected: n,
            found: target.len().min(sensitive.len()),
        });
    }
    let k = q + 1 + usize::from(condition_on_sensitive);
    let design = DMatrix::from_fn(n, k, |i, c| match c {
        0 => 1.0,
        c if c <= q => covariates[(i, c - 1)],
        _ => sensitive[i],
    });
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(target);
    let coef = xtx
        .cholesky()
        .ok_or_else(|| Error::DegenerateData("proxy regression design is singular".into()))?
        .solve(&xty);
    Ok((0..n)
        .map(|i| {
            let mut v = coef[0];
            for m in 0..q {
                v += coef[1 + m] * covariates[(i, m)];
            }
            if condition_on_sensitive {
                v += coef[q + 1] * reference_code;
            }
            v
        })
        .collect())
}

/// Fair and naive scores with decisions on `kind`, thresholded against
/// `reference_scores` (the same kind of score on the training rows).
pub fn score_set(
    model: &MimicModel,
    row_ids: Vec<String>,
    covariates: &DMatrix<f64>,
    sensitive: &[f64],
    reference_level: &str,
    kind: ScoreKind,
    percentile: f64,
    reference_scores: &[f64],
) -> Result<ScoreSet> {
    let fair = fair_score(model, covariates, sensitive, reference_level)?;
    let naive = naive_score(model, covariates, sensitive)?;
    let chosen = match kind {
        ScoreKind::Fair => &fair,
        ScoreKind::Naive => &naive,
    };
    let d = decide(chosen, percentile, reference_scores)?;
    Ok(ScoreSet {
        row_ids,
        fair_score: fair,
        naive_score: naive,
        decision: d.decision,
        decided_on: kind,
        threshold_value: d.threshold_value,
        threshold_percentile: percentile,
        reference_level: reference_level.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MimicModel {
        let mut m = MimicModel::with_dims(2, 2);
        m.struct_coefs = vec![1.0, 2.0];
        m.sens_coef = 3.0;
        m
    }

    #[test]
    fn fair_score_blocks_the_sensitive_path() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let fair = fair_score(&model(), &x, &[0.0, 1.0], "0").unwrap();
        assert_eq!(fair, vec![3.0, 3.0]);
        assert_eq!(fair[0].to_bits(), fair[1].to_bits());
        let naive = naive_score(&model(), &x, &[0.0, 1.0]).unwrap();
        assert_eq!(naive, vec![3.0, 6.0]);
    }

    #[test]
    fn fair_score_at_focal_reference() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(fair_score(&model(), &x, &[0.0], "1").unwrap(), vec![6.0]);
        assert!(matches!(
            fair_score(&model(), &x, &[0.0], "martian"),
            Err(Error::UnknownLevel(_))
        ));
    }

    #[test]
    fn zero_sensitive_effect_makes_scores_coincide() {
        let mut m = model();
        m.sens_coef = 0.0;
        let x = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.0, -0.3, 0.7]);
        let s = [0.0, 1.0, 1.0];
        assert_eq!(fair_score(&m, &x, &s, "0").unwrap(), naive_score(&m, &x, &s).unwrap());
    }

    #[test]
    fn naive_minus_fair_over_focal_group() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.0, -0.3, 0.7]);
        let s = [1.0, 1.0, 1.0];
        let fair = fair_score(&model(), &x, &s, "0").unwrap();
        let naive = naive_score(&model(), &x, &s).unwrap();
        let diff = (naive.iter().sum::<f64>() - fair.iter().sum::<f64>()) / 3.0;
        assert!((diff - 3.0 * (1.0 - 0.0)).abs() < 1e-12);
    }

    #[test]
    fn decide_on_one_to_hundred() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let d = decide(&scores, 55.0, &scores).unwrap();
        assert_eq!(d.threshold_value, 55.0);
        for (s, dec) in scores.iter().zip(&d.decision) {
            assert_eq!(*dec == 1, *s >= 56.0);
        }
    }

    #[test]
    fn decide_all_equal_selects_nobody() {
        let scores = vec![2.5; 20];
        let d = decide(&scores, 55.0, &scores).unwrap();
        assert!(d.decision.iter().all(|&v| v == 0));
    }

    #[test]
    fn decide_rejects_bad_input() {
        assert!(decide(&[], 55.0, &[1.0]).is_err());
        assert!(decide(&[1.0], 55.0, &[]).is_err());
        assert!(decide(&[1.0], 0.0, &[1.0]).is_err());
        assert!(decide(&[1.0], 100.0, &[1.0]).is_err());
    }

    #[test]
    fn noiseless_factor_score_tracks_first_indicator() {
        let mut m = MimicModel::with_dims(3, 1);
        m.loadings = vec![1.0, 0.5, 2.0];
        m.intercepts = vec![0.3, 1.0, -1.0];
        m.resid_vars = vec![1e-8, 1.0, 1.0];
        m.struct_coefs = vec![0.7];
        let frame = ModelFrame::new(
            DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, -1.0, 3.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -2.0]),
            vec![0.0, 1.0],
        )
        .unwrap();
        let f = factor_score(&m, &frame).unwrap();
        assert!((f[0] - 1.7).abs() < 1e-6, "{f:?}");
        assert!((f[1] + 1.3).abs() < 1e-6, "{f:?}");
    }

    #[test]
    fn score_csv_round_trip() {
        let set = ScoreSet {
            row_ids: vec!["a".into(), "b".into()],
            fair_score: vec![0.1, -2.5],
            naive_score: vec![0.2, 1e-9],
            decision: vec![1, 0],
            decided_on: ScoreKind::Fair,
            threshold_value: 0.0,
            threshold_percentile: 55.0,
            reference_level: "w".into(),
        };
        let text = set.to_csv_string().unwrap();
        assert!(text.starts_with("row_id,fair_score,naive_score,decision\n"));
        let back = ScoreSet::from_csv_str(&text).unwrap();
        assert_eq!(back.fair_score, set.fair_score);
        assert_eq!(back.naive_score, set.naive_score);
        assert_eq!(back.decision, set.decision);
    }

    #[test]
    fn proxy_score_conditioned_predicts_at_reference() {
        // target = 1 + 2x + 5s exactly.
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let s = [0.0, 1.0, 0.0, 1.0];
        let t: Vec<f64> = (0..4).map(|i| 1.0 + 2.0 * x[(i, 0)] + 5.0 * s[i]).collect();
        let fair = proxy_score(&x, &s, &t, true, 0.0).unwrap();
        for i in 0..4 {
            assert!((fair[i] - (1.0 + 2.0 * x[(i, 0)])).abs() < 1e-10);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(default)]
    pub log1p: Vec<String>,
    #[serde(default)]
    pub standardize: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub sd: f64,
}

/// Statistics fitted on the training split, reapplied unchanged to other data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub log1p: Vec<String>,
    pub standardize: Vec<ColumnScaling>,
}

fn apply_log1p(data: &mut Dataset, column: &str) -> Result<()> {
    let values = data.numeric(column)?;
    if let Some((row, v)) = values.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::InvalidData(format!(
            "log1p column '{column}' has negative value {v} at row {}",
            row + 1
        )));
    }
    let logged = values.iter().map(|v| v.ln_1p()).collect();
    data.replace_numeric(column, logged);
    data.flag_log_scale(column);
    Ok(())
}

/// Applies `ln(1 + x)` to the log columns, then centers and scales the
/// standardize columns with statistics computed from `data` itself.
pub fn transform(data: &Dataset, spec: &TransformSpec) -> Result<(Dataset, TransformRecord)> {
    let mut out = data.clone();
    for column in &spec.log1p {
        apply_log1p(&mut out, column)?;
    }
    let mut scalings = Vec::with_capacity(spec.standardize.len());
    for column in &spec.standardize {
        let values = out.numeric(column)?;
        let n = values.len() as f64;
        if values.is_empty() {
            return Err(Error::DegenerateData(format!("cannot standardize empty column '{column}'")));
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 0.0) {
            return Err(Error::DegenerateData(format!("column '{column}' has zero variance")));
        }
        let scaled = values.iter().map(|v| (v - mean) / sd).collect();
        out.replace_numeric(column, scaled);
        scalings.push(ColumnScaling {
            column: column.clone(),
            mean,
            sd,
        });
    }
    let record = TransformRecord {
        log1p: spec.log1p.clone(),
        standardize: scalings,
    };
    Ok((out, record))
}

impl TransformRecord {
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        for column in &self.log1p {
            apply_log1p(&mut out, column)?;
        }
        for s in &self.standardize {
            let scaled = out.numeric(&s.column)?.iter().map(|v| (v - s.mean) / s.sd).collect();
            out.replace_numeric(&s.column, scaled);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

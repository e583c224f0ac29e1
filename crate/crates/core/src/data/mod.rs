//! Column-role-tagged tabular data and the pieces that feed it: CSV
//! ingestion, log/standardize transforms, train/test splitting, and the
//! seeded synthetic generator.

mod csv_io;
mod simulate;
mod transform;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MimicModel, ModelFrame, SensitiveCoding};

pub use csv_io::{load_csv, load_csv_str};
pub use simulate::{simulate, standard_normal, unit_uniform, SimSpec, Simulation};
pub use transform::{transform, ColumnScaling, TransformRecord, TransformSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Indicator,
    Covariate,
    Sensitive,
    Id,
    Ignore,
}

/// How the columns of a CSV file are used. Serialized as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub roles: BTreeMap<String, Role>,
    /// Model order of the indicators; the first one carries the pinned loading.
    /// Defaults to file order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicator_order: Option<Vec<String>>,
    /// `[reference, focal]`: the levels coded 0 and 1. Defaults to the two
    /// observed levels in sorted order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_levels: Option<[String; 2]>,
    /// Indicators already on a log scale.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log_scale: Vec<String>,
    /// Columns to map through ln(1 + x) before fitting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log1p: Vec<String>,
    /// Columns to center and scale with training-split statistics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub standardize: Vec<String>,
}

impl RoleConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn transform_spec(&self) -> TransformSpec {
        TransformSpec {
            log1p: self.log1p.clone(),
            standardize: self.standardize.clone(),
        }
    }

    /// Same config with the covariate set replaced: `keep` stay covariates,
    /// every other covariate becomes `ignore`.
    pub fn with_covariates(&self, keep: &[String]) -> Self {
        let mut out = self.clone();
        for (name, role) in out.roles.iter_mut() {
            if *role == Role::Covariate && !keep.contains(name) {
                *role = Role::Ignore;
            }
        }
        out.standardize.retain(|c| self.roles.get(c) != Some(&Role::Covariate) || keep.contains(c));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Text(Vec<String>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Text(v) => v.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Text(v) => ColumnData::Text(rows.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    fn cell(&self, i: usize) -> String {
        match self {
            ColumnData::Numeric(v) => v[i].to_string(),
            ColumnData::Text(v) => v[i].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: Role,
    pub data: ColumnData,
}

/// Validated table. Indicator, covariate and sensitive columns are complete;
/// indicator and covariate columns are numeric, the sensitive column holds
/// labels drawn from the two levels of `coding`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    indicators: Vec<usize>,
    covariates: Vec<usize>,
    sensitive: usize,
    id: Option<usize>,
    coding: SensitiveCoding,
    log_scale: BTreeSet<String>,
    n: usize,
}

impl Dataset {
    /// Assembles a dataset from columns in file order. `indicator_order`
    /// overrides the model order of the indicator columns.
    pub fn from_columns(
        columns: Vec<Column>,
        indicator_order: Option<&[String]>,
        sensitive_levels: Option<&[String; 2]>,
        log_scale: &[String],
    ) -> Result<Self> {
        let n = columns.first().map(|c| c.data.len()).unwrap_or(0);
        if let Some(c) = columns.iter().find(|c| c.data.len() != n) {
            return Err(Error::InvalidData(format!(
                "column '{}' has {} rows, expected {n}",
                c.name,
                c.data.len()
            )));
        }
        let mut seen = BTreeSet::new();
        if let Some(c) = columns.iter().find(|c| !seen.insert(c.name.as_str())) {
            return Err(Error::InvalidData(format!("duplicate column '{}'", c.name)));
        }
        let by_role = |role| columns.iter().enumerate().filter(move |(_, c)| c.role == role).map(|(i, _)| i);

        let mut indicators: Vec<usize> = by_role(Role::Indicator).collect();
        if let Some(order) = indicator_order {
            let reordered: Vec<usize> = order
                .iter()
                .map(|name| {
                    indicators
                        .iter()
                        .copied()
                        .find(|&i| &columns[i].name == name)
                        .ok_or_else(|| Error::RoleConfig(format!("indicator_order names '{name}', which is not an indicator")))
                })
                .collect::<Result<_>>()?;
            if reordered.len() != indicators.len() {
                return Err(Error::RoleConfig("indicator_order must list every indicator exactly once".into()));
            }
            indicators = reordered;
        }
        if indicators.len() < 2 {
            return Err(Error::RoleConfig(format!(
                "a measurement model needs at least 2 indicators, found {}",
                indicators.len()
            )));
        }
        let covariates: Vec<usize> = by_role(Role::Covariate).collect();
        let sensitive: Vec<usize> = by_role(Role::Sensitive).collect();
        if sensitive.len() != 1 {
            return Err(Error::RoleConfig(format!(
                "exactly one sensitive column required, found {}",
                sensitive.len()
            )));
        }
        let sensitive = sensitive[0];
        let ids: Vec<usize> = by_role(Role::Id).collect();
        if ids.len() > 1 {
            return Err(Error::RoleConfig("at most one id column allowed".into()));
        }
        for &i in indicators.iter().chain(&covariates) {
            if !matches!(columns[i].data, ColumnData::Numeric(_)) {
                return Err(Error::InvalidData(format!("column '{}' must be numeric", columns[i].name)));
            }
        }
        let ColumnData::Text(labels) = &columns[sensitive].data else {
            return Err(Error::InvalidData("sensitive column must hold level labels".into()));
        };
        let observed: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        let sens_name = columns[sensitive].name.clone();
        let coding = match sensitive_levels {
            Some([reference, focal]) => {
                if reference == focal {
                    return Err(Error::RoleConfig("sensitive levels must differ".into()));
                }
                if let Some(bad) = observed.iter().find(|l| **l != reference && **l != focal) {
                    return Err(Error::UnknownLevel(bad.to_string()));
                }
                SensitiveCoding::new(sens_name, reference.clone(), focal.clone())
            }
            None => {
                let levels: Vec<&str> = observed.iter().copied().collect();
                if levels.len() != 2 {
                    return Err(Error::InvalidData(format!(
                        "sensitive column '{sens_name}' must have exactly 2 levels, found {}",
                        levels.len()
                    )));
                }
                SensitiveCoding::new(sens_name, levels[0], levels[1])
            }
        };
        let indicator_names: BTreeSet<&str> = indicators.iter().map(|&i| columns[i].name.as_str()).collect();
        for name in log_scale {
            if !indicator_names.contains(name.as_str()) {
                return Err(Error::RoleConfig(format!("log_scale names '{name}', which is not an indicator")));
            }
        }
        Ok(Self {
            indicators,
            covariates,
            sensitive,
            id: ids.first().copied(),
            coding,
            log_scale: log_scale.iter().cloned().collect(),
            n,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name) {
            Some(Column {
                data: ColumnData::Numeric(v),
                ..
            }) => Ok(v),
            Some(_) => Err(Error::InvalidData(format!("column '{name}' is not numeric"))),
            None => Err(Error::UnknownColumn(name.to_string())),
        }
    }

    pub fn indicator_names(&self) -> Vec<String> {
        self.indicators.iter().map(|&i| self.columns[i].name.clone()).collect()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.covariates.iter().map(|&i| self.columns[i].name.clone()).collect()
    }

    pub fn coding(&self) -> &SensitiveCoding {
        &self.coding
    }

    pub fn sensitive_labels(&self) -> &[String] {
        match &self.columns[self.sensitive].data {
            ColumnData::Text(v) => v,
            ColumnData::Numeric(_) => unreachable!("validated as text"),
        }
    }

    pub fn sensitive_codes(&self) -> Vec<f64> {
        self.sensitive_labels()
            .iter()
            .map(|l| if *l == self.coding.reference { 0.0 } else { 1.0 })
            .collect()
    }

    /// Row identifiers: the id column when present, else the 0-based row index.
    pub fn row_ids(&self) -> Vec<String> {
        match self.id {
            Some(c) => (0..self.n).map(|i| self.columns[c].data.cell(i)).collect(),
            None => (0..self.n).map(|i| i.to_string()).collect(),
        }
    }

    pub fn is_log_scale(&self, indicator: &str) -> bool {
        self.log_scale.contains(indicator)
    }

    pub fn log_scale_flags(&self) -> Vec<bool> {
        self.indicator_names().iter().map(|n| self.is_log_scale(n)).collect()
    }

    fn numeric_matrix(&self, cols: &[usize]) -> DMatrix<f64> {
        let data: Vec<&[f64]> = cols
            .iter()
            .map(|&c| match &self.columns[c].data {
                ColumnData::Numeric(v) => v.as_slice(),
                ColumnData::Text(_) => unreachable!("validated as numeric"),
            })
            .collect();
        DMatrix::from_fn(self.n, cols.len(), |i, j| data[j][i])
    }

    pub fn indicator_matrix(&self) -> DMatrix<f64> {
        self.numeric_matrix(&self.indicators)
    }

    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        self.numeric_matrix(&self.covariates)
    }

    pub fn model_frame(&self) -> Result<ModelFrame> {
        ModelFrame::new(self.indicator_matrix(), self.covariate_matrix(), self.sensitive_codes())
    }

    /// Model over this dataset's indicators and covariates with unit
    /// starting values and every δ constrained.
    pub fn base_model(&self) -> MimicModel {
        let mut m = MimicModel::new(self.indicator_names(), self.covariate_names(), self.coding.clone());
        m.log_scale = self.log_scale_flags();
        m
    }

    /// New dataset holding `rows` (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let mut out = self.clone();
        for c in out.columns.iter_mut() {
            c.data = c.data.select(rows);
        }
        out.n = rows.len();
        out
    }

    pub(crate) fn replace_numeric(&mut self, name: &str, values: Vec<f64>) {
        if let Some(c) = self.columns.iter_mut().find(|c| c.name == name) {
            c.data = ColumnData::Numeric(values);
        }
    }

    pub(crate) fn flag_log_scale(&mut self, name: &str) {
        if self.indicators.iter().any(|&i| self.columns[i].name == name) {
            self.log_scale.insert(name.to_string());
        }
    }

    /// Role config that reproduces this dataset's roles and coding.
    pub fn role_config(&self) -> RoleConfig {
        RoleConfig {
            roles: self.columns.iter().map(|c| (c.name.clone(), c.role)).collect(),
            indicator_order: Some(self.indicator_names()),
            sensitive_levels: Some([self.coding.reference.clone(), self.coding.focal.clone()]),
            log_scale: self.log_scale.iter().cloned().collect(),
            log1p: Vec::new(),
            standardize: Vec::new(),
        }
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for i in 0..self.n {
            w.write_record(self.columns.iter().map(|c| c.data.cell(i)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }
}

/// Seeded row partition. Rows keep their original relative order within
/// each part; `round(n · train_frac)` rows go to the training part.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must be in (0, 1), got {train_frac}")));
    }
    let n = data.n_rows();
    let n_train = (n as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at fraction {train_frac} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select_rows(&train), data.select_rows(&test)))
}

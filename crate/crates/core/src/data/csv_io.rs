use std::path::Path;

use super::{Column, ColumnData, Dataset, Role, RoleConfig};
use crate::error::{Error, Result};

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("null")
}

pub fn load_csv(path: impl AsRef<Path>, roles: &RoleConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_csv_str(&text, roles)
}

/// Parses CSV text (header row required) under `roles`. Row numbers in
/// errors count data rows from 1.
pub fn load_csv_str(text: &str, roles: &RoleConfig) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(Error::InvalidData("missing header row".into()));
    }
    for name in roles.roles.keys() {
        if !header.contains(name) {
            return Err(Error::UnknownColumn(name.clone()));
        }
    }
    let col_roles: Vec<Role> = header
        .iter()
        .map(|h| roles.roles.get(h).copied().ok_or_else(|| Error::UnassignedColumn(h.clone())))
        .collect::<Result<_>>()?;
    let numeric = |r: Role| matches!(r, Role::Indicator | Role::Covariate);

    let mut numbers: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    let mut texts: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    let mut missing_rows = 0usize;
    let mut first_missing: Option<(usize, String)> = None;

    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let mut row_missing = false;
        for (c, role) in col_roles.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let required = *role != Role::Ignore;
            if required && is_missing(cell) {
                if !row_missing && first_missing.is_none() {
                    first_missing = Some((row, header[c].clone()));
                }
                row_missing = true;
                continue;
            }
            if numeric(*role) {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    row,
                    column: header[c].clone(),
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        row,
                        column: header[c].clone(),
                        value: cell.to_string(),
                    });
                }
                numbers[c].push(v);
            } else {
                texts[c].push(cell.to_string());
            }
        }
        if row_missing {
            missing_rows += 1;
        }
    }
    if let Some((row, column)) = first_missing {
        return Err(Error::MissingValues {
            count: missing_rows,
            row,
            column,
        });
    }

    let columns = header
        .into_iter()
        .zip(col_roles)
        .enumerate()
        .map(|(c, (name, role))| Column {
            name,
            role,
            data: if numeric(role) {
                ColumnData::Numeric(std::mem::take(&mut numbers[c]))
            } else {
                ColumnData::Text(std::mem::take(&mut texts[c]))
            },
        })
        .collect();
    Dataset::from_columns(
        columns,
        roles.indicator_order.as_deref(),
        roles.sensitive_levels.as_ref(),
        &roles.log_scale,
    )
}

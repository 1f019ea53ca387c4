//! CSV ingestion: header row required, `.` decimals, no missing values.

use std::collections::HashSet;
use std::path::Path;

use alqr_core::linalg::Design;
use alqr_core::{Dataset, ExposureKind};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureChoice {
    /// Binary when every exposure value is 0 or 1.
    Auto,
    Binary,
    Continuous,
}

/// Which columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub exposure: String,
    /// `None` means every column without another role.
    pub covariates: Option<Vec<String>>,
    pub weights: Option<String>,
}

#[derive(Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub covariates: Vec<String>,
    pub exposure_kind: ExposureKind,
}

pub fn load_dataset(path: &Path, roles: &ColumnRoles, exposure: ExposureChoice) -> Result<LoadedData, CliError> {
    if !path.exists() {
        return Err(CliError::FileNotFound(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    read_dataset(file, roles, exposure)
}

pub fn read_dataset(
    input: impl std::io::Read,
    roles: &ColumnRoles,
    exposure: ExposureChoice,
) -> Result<LoadedData, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Schema(format!("cannot read header row: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(CliError::Schema("header row is empty".into()));
    }
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(CliError::Schema(format!("duplicate column `{h}`")));
        }
    }

    let mut fixed = vec![roles.outcome.clone(), roles.exposure.clone()];
    fixed.extend(roles.weights.clone());
    let covariates = match &roles.covariates {
        Some(c) => c.clone(),
        None => header.iter().filter(|h| !fixed.contains(h)).cloned().collect(),
    };
    let mut role_cols = fixed.clone();
    role_cols.extend(covariates.iter().cloned());
    let mut distinct = HashSet::new();
    for c in &role_cols {
        if !distinct.insert(c.as_str()) {
            return Err(CliError::Schema(format!("column `{c}` is assigned more than one role")));
        }
    }
    if covariates.is_empty() {
        return Err(CliError::Schema("no covariate columns".into()));
    }
    let index = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CliError::Schema(format!("missing column `{name}`")))
    };
    let idx: Vec<usize> = role_cols.iter().map(|c| index(c)).collect::<Result<_, _>>()?;

    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); idx.len()];
    for (r, record) in reader.records().enumerate() {
        // 1-based line number in the file, counting the header
        let row = r + 2;
        let record = record.map_err(|e| CliError::Schema(format!("line {row}: {e}")))?;
        for (k, &j) in idx.iter().enumerate() {
            let cell = record.get(j).unwrap_or("");
            cols[k].push(parse_cell(cell, row, &role_cols[k])?);
        }
    }
    let n = cols[0].len();
    if n == 0 {
        return Err(CliError::Schema("no data rows".into()));
    }

    let y = cols[0].clone();
    let a = cols[1].clone();
    let (w, first_cov) = match roles.weights {
        Some(_) => (Some(cols[2].clone()), 3),
        None => (None, 2),
    };
    let cov = &cols[first_cov..];
    let l = Design::from_fn(n, cov.len(), |i, j| cov[j][i]);
    let kind = match exposure {
        ExposureChoice::Binary => ExposureKind::Binary,
        ExposureChoice::Continuous => ExposureKind::Continuous,
        ExposureChoice::Auto if a.iter().all(|&v| v == 0.0 || v == 1.0) => ExposureKind::Binary,
        ExposureChoice::Auto => ExposureKind::Continuous,
    };
    let dataset = Dataset::new(y, a, l, kind, w)?;
    Ok(LoadedData { dataset, covariates, exposure_kind: kind })
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, CliError> {
    let bad = |message: String| CliError::Cell { row, column: column.to_owned(), message };
    if cell.is_empty() {
        return Err(bad("missing value".into()));
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(bad(format!("non-finite value `{cell}`"))),
        Err(_) => Err(bad(format!("non-numeric value `{cell}`"))),
    }
}

//! Serialized outputs. Every JSON document carries `schema_version`.

use std::io::Write;
use std::path::{Path, PathBuf};

use alqr_core::simulation::{McRow, McSummary};
use alqr_core::{EstimatorKind, EstimatorOutput, ExposureKind, Link, TmleMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// Explicit choice, else from the output extension, else JSON.
    pub fn resolve(explicit: Option<Format>, out: Option<&Path>) -> Format {
        explicit.unwrap_or_else(|| match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub code: String,
    pub message: String,
}

/// Result at one τ: either an estimate or the error that prevented it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauResult {
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output: Option<EstimatorOutput>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<ErrorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub input: String,
    pub n: usize,
    pub outcome: String,
    pub exposure: String,
    pub covariates: Vec<String>,
    pub weights: Option<String>,
    pub exposure_kind: ExposureKind,
    pub estimator: EstimatorKind,
    pub folds: usize,
    pub seed: u64,
    pub link: Link,
    pub tmle_mode: TmleMode,
    /// False when at least one τ failed.
    pub complete: bool,
    pub results: Vec<TauResult>,
}

pub fn analysis_csv(report: &AnalysisReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "tau",
        "estimator",
        "psi_hat",
        "se",
        "ci_low",
        "ci_high",
        "targeting_residual",
        "n_iterations",
        "converged",
        "folds",
        "fold_seed",
        "density_floored",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &report.results {
        let mut rec = vec![r.tau.to_string(), report.estimator.to_string()];
        match (&r.output, &r.error) {
            (Some(o), _) => {
                let d = &o.diagnostics;
                rec.extend([
                    o.psi_hat.to_string(),
                    o.se.to_string(),
                    o.ci_low.to_string(),
                    o.ci_high.to_string(),
                    d.targeting_residual.to_string(),
                    d.n_iterations.to_string(),
                    d.converged.to_string(),
                    d.folds.to_string(),
                    d.fold_seed.to_string(),
                    d.density_floored.to_string(),
                    String::new(),
                ]);
            }
            (None, e) => {
                rec.extend(std::iter::repeat_n(String::new(), 10));
                rec.push(e.as_ref().map(|e| e.code.clone()).unwrap_or_default());
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Schema(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport<'a> {
    pub schema_version: u32,
    pub num_trees: usize,
    pub cf_folds: usize,
    #[serde(flatten)]
    pub summary: &'a McSummary,
}

pub fn simulation_csv(summary: &McSummary) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment",
        "n",
        "estimator",
        "tau",
        "truth",
        "bias",
        "sd",
        "se",
        "coverage",
        "n_reps",
        "n_failures",
        "degenerate_moments",
        "mean_abs_targeting_residual",
        "median_targeting_residual",
    ])
    .map_err(csv_err)?;
    for r in &summary.rows {
        let McRow { estimator, tau, truth, bias, mc_sd, mean_se, coverage_95, n_reps, n_failures, .. } = r;
        w.write_record([
            summary.experiment.to_string(),
            summary.n.to_string(),
            estimator.to_string(),
            tau.to_string(),
            truth.to_string(),
            bias.to_string(),
            mc_sd.to_string(),
            mean_se.to_string(),
            coverage_95.to_string(),
            n_reps.to_string(),
            n_failures.to_string(),
            r.degenerate_moments.to_string(),
            r.mean_abs_targeting_residual.to_string(),
            r.median_targeting_residual.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Schema(e.to_string()))
}

/// One analysis in a sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub run: usize,
    pub seed: u64,
    pub folds: usize,
    pub tau: f64,
    pub psi_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub error: Option<ErrorEntry>,
}

/// Spread of ψ̂ across the runs sharing a fold count and τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub folds: usize,
    pub tau: f64,
    pub n_ok: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with fewer than two successful runs.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub input: String,
    pub estimator: EstimatorKind,
    pub base_seed: u64,
    pub repeat: usize,
    pub runs: Vec<SensitivityRun>,
    pub dispersion: Vec<Dispersion>,
}

/// Long format: one `run` row per analysis followed by `dispersion` rows.
pub fn sensitivity_csv(report: &SensitivityReport) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "row_type", "folds", "tau", "run", "seed", "psi_hat", "se", "ci_low", "ci_high", "error", "n_ok", "mean", "sd",
        "min", "max",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.runs {
        w.write_record([
            "run".to_string(),
            r.folds.to_string(),
            r.tau.to_string(),
            r.run.to_string(),
            r.seed.to_string(),
            opt(r.psi_hat),
            opt(r.se),
            opt(r.ci_low),
            opt(r.ci_high),
            r.error.as_ref().map(|e| e.code.clone()).unwrap_or_default(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
    }
    for d in &report.dispersion {
        let mut rec = vec!["dispersion".to_string(), d.folds.to_string(), d.tau.to_string()];
        rec.extend(std::iter::repeat_n(String::new(), 7));
        rec.extend([d.n_ok.to_string(), d.mean.to_string(), d.sd.to_string(), d.min.to_string(), d.max.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Schema(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Schema(format!("csv output: {e}"))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Schema(format!("json output: {e}")))?;
    v.push(b'\n');
    Ok(v)
}

/// Writes to `out`, or stdout when absent.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|source| CliError::Io { path: p.to_path_buf(), source }),
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(bytes)
                .and_then(|_| s.flush())
                .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })
        }
    }
}

use std::path::{Path, PathBuf};

use alqr_core::rng::derive_seed;
use alqr_core::simulation::{run_monte_carlo, DgpSpec, ExperimentId, McOptions, SimEstimator};
use alqr_core::{
    estimate_many, AlqrError, EstimatorConfig, EstimatorKind, LearnerSettings, Link, MeanCandidates, TmleMode,
};

use crate::error::CliError;
use crate::report::{
    analysis_csv, emit, json_bytes, sensitivity_csv, simulation_csv, AnalysisReport, Dispersion, ErrorEntry, Format,
    SensitivityReport, SensitivityRun, SimulationReport, TauResult, SCHEMA_VERSION,
};
use crate::table::{load_dataset, ColumnRoles, ExposureChoice, LoadedData};

#[derive(Debug, Clone)]
pub struct AnalysisRequest {
    pub input: PathBuf,
    pub roles: ColumnRoles,
    pub taus: Vec<f64>,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub link: Link,
    pub tmle_mode: TmleMode,
    pub exposure_kind: ExposureChoice,
    pub num_trees: Option<usize>,
    pub mean_candidates: MeanCandidates,
    pub format: Format,
    pub out: Option<PathBuf>,
}

impl AnalysisRequest {
    fn config(&self, folds: usize, seed: u64) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::new(self.taus.first().copied().unwrap_or(0.5), self.estimator);
        cfg.folds = folds;
        cfg.seed = seed;
        cfg.link = self.link;
        cfg.tmle_mode = self.tmle_mode;
        if let Some(t) = self.num_trees {
            cfg.learners.num_trees = t;
        }
        cfg.learners.mean_candidates = self.mean_candidates;
        cfg
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.taus.is_empty() {
            return Err(CliError::Usage("at least one τ is required".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(CliError::Usage(format!("τ must lie in (0, 1), got {t}")));
        }
        Ok(())
    }
}

fn error_entry(e: &AlqrError) -> ErrorEntry {
    ErrorEntry { code: e.code().to_owned(), message: e.to_string() }
}

/// Per-τ results plus the first per-τ failure, if any.
fn run_analysis(
    req: &AnalysisRequest,
    data: &LoadedData,
    folds: usize,
    seed: u64,
) -> Result<(Vec<TauResult>, Option<AlqrError>), CliError> {
    let cfg = req.config(folds, seed);
    cfg.validate()?;
    // Past validation, a failure shared by every τ (e.g. in the nuisance
    // stage) is reported per τ like any other.
    let results = match estimate_many(&data.dataset, &req.taus, &cfg) {
        Ok(r) => r,
        Err(e) => req.taus.iter().map(|_| Err(e.clone())).collect(),
    };
    let mut first = None;
    let rows = req
        .taus
        .iter()
        .zip(results)
        .map(|(&tau, r)| match r {
            Ok(est) => TauResult { tau, output: Some(est.output), error: None },
            Err(e) => {
                let entry = error_entry(&e);
                first.get_or_insert(e);
                TauResult { tau, output: None, error: Some(entry) }
            }
        })
        .collect();
    Ok((rows, first))
}

pub fn analyze(req: &AnalysisRequest, folds: usize) -> Result<(), CliError> {
    req.validate()?;
    let data = load_dataset(&req.input, &req.roles, req.exposure_kind)?;
    let (results, first_error) = run_analysis(req, &data, folds, req.seed)?;
    let report = AnalysisReport {
        schema_version: SCHEMA_VERSION,
        input: req.input.display().to_string(),
        n: data.dataset.n(),
        outcome: req.roles.outcome.clone(),
        exposure: req.roles.exposure.clone(),
        covariates: data.covariates.clone(),
        weights: req.roles.weights.clone(),
        exposure_kind: data.exposure_kind,
        estimator: req.estimator,
        folds,
        seed: req.seed,
        link: req.link,
        tmle_mode: req.tmle_mode,
        complete: first_error.is_none(),
        results,
    };
    let bytes = match req.format {
        Format::Json => json_bytes(&report)?,
        Format::Csv => analysis_csv(&report)?,
    };
    emit(req.out.as_deref(), &bytes)?;
    // Partial results are written above; the exit status still reports the failure.
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn sensitivity(req: &AnalysisRequest, repeat: usize, folds: &[usize]) -> Result<(), CliError> {
    req.validate()?;
    if repeat < 2 {
        return Err(CliError::Usage(format!("--repeat must be at least 2, got {repeat}")));
    }
    if folds.is_empty() {
        return Err(CliError::Usage("at least one fold count is required".into()));
    }
    let data = load_dataset(&req.input, &req.roles, req.exposure_kind)?;
    let mut runs = Vec::new();
    for &k in folds {
        for r in 0..repeat {
            let seed = derive_seed(req.seed, r as u64);
            for res in run_analysis(req, &data, k, seed)?.0 {
                let o = res.output.as_ref();
                runs.push(SensitivityRun {
                    run: r,
                    seed,
                    folds: k,
                    tau: res.tau,
                    psi_hat: o.map(|o| o.psi_hat),
                    se: o.map(|o| o.se),
                    ci_low: o.map(|o| o.ci_low),
                    ci_high: o.map(|o| o.ci_high),
                    error: res.error,
                });
            }
        }
    }
    let mut dispersion = Vec::new();
    for &k in folds {
        for &tau in &req.taus {
            let psi: Vec<f64> =
                runs.iter().filter(|r| r.folds == k && r.tau == tau).filter_map(|r| r.psi_hat).collect();
            dispersion.push(dispersion_of(k, tau, &psi));
        }
    }
    let report = SensitivityReport {
        schema_version: SCHEMA_VERSION,
        input: req.input.display().to_string(),
        estimator: req.estimator,
        base_seed: req.seed,
        repeat,
        runs,
        dispersion,
    };
    let bytes = match req.format {
        Format::Json => json_bytes(&report)?,
        Format::Csv => sensitivity_csv(&report)?,
    };
    emit(req.out.as_deref(), &bytes)
}

fn dispersion_of(folds: usize, tau: f64, psi: &[f64]) -> Dispersion {
    let n = psi.len();
    let mean = psi.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 { 0.0 } else { (psi.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    Dispersion {
        folds,
        tau,
        n_ok: n,
        mean,
        sd,
        min: psi.iter().copied().fold(f64::INFINITY, f64::min),
        max: psi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone)]
pub struct SimulationRequest {
    pub experiment: String,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<String>,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub num_trees: Option<usize>,
    pub folds: usize,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn simulate(req: &SimulationRequest) -> Result<(), CliError> {
    let id: ExperimentId = req.experiment.parse().map_err(|_| CliError::UnknownExperiment(req.experiment.clone()))?;
    let estimators: Vec<SimEstimator> = req.estimators.iter().map(|e| e.parse()).collect::<Result<_, _>>()?;
    if estimators.is_empty() {
        return Err(CliError::Usage("at least one estimator is required".into()));
    }
    let mut settings = LearnerSettings::default();
    if let Some(t) = req.num_trees {
        settings.num_trees = t;
    }
    let opts = McOptions { threads: req.threads, settings, cf_folds: req.folds, ..McOptions::default() };
    let summary = run_monte_carlo(&DgpSpec::new(id, req.n), &estimators, &req.taus, req.reps, req.seed, &opts)?;
    for r in summary.rows.iter().filter(|r| r.degenerate_moments) {
        eprintln!(
            "warning: {} at τ={} has {} successful replication(s); SD reported as 0",
            r.estimator, r.tau, r.n_reps
        );
    }
    let csv = simulation_csv(&summary)?;
    let json = json_bytes(&SimulationReport {
        schema_version: SCHEMA_VERSION,
        num_trees: opts.settings.num_trees,
        cf_folds: opts.cf_folds,
        summary: &summary,
    })?;
    match &req.out {
        None => emit(None, &csv),
        Some(p) => {
            let (csv_path, json_path) = sibling_paths(p);
            emit(Some(&csv_path), &csv)?;
            emit(Some(&json_path), &json)
        }
    }
}

/// `table.csv` → (`table.csv`, `table.json`); any other name gets both
/// extensions swapped in.
fn sibling_paths(p: &Path) -> (PathBuf, PathBuf) {
    (p.with_extension("csv"), p.with_extension("json"))
}

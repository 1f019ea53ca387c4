//! Monte Carlo driver and summary metrics.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{estimate_nuisances_multi, Link, NuisanceFits, NuisanceRequest, QuantileLearner, TruthModel};
use crate::error::{AlqrError, Result};
use crate::estimate::estimate_from_nuisances;
use crate::model::{
    make_folds, Dataset, EstimatorConfig, EstimatorKind, EstimatorOutput, ExposureKind, LearnerSettings,
    MeanCandidates, TmleMode,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulation::dgp::{true_psi, DgpSpec, ExperimentId};
use crate::simulation::reference::{naive_qr_estimate, oracle_estimate, qr_vs_estimate};

/// Estimators available to the simulation harness. The `-cf` variants use
/// cross-fitted nuisances; the others fit and evaluate on the full sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SimEstimator {
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "qr")]
    Qr,
    #[serde(rename = "qr-vs")]
    QrVs,
    #[serde(rename = "plugin")]
    PlugIn,
    #[serde(rename = "dml")]
    Dml,
    #[serde(rename = "dml-cf")]
    DmlCf,
    #[serde(rename = "tmle")]
    Tmle,
    #[serde(rename = "tmle-cf")]
    TmleCf,
    /// Single targeting step (binary exposure).
    #[serde(rename = "tmle1")]
    Tmle1,
    #[serde(rename = "tmle1-cf")]
    Tmle1Cf,
    #[serde(rename = "dml-vs")]
    DmlVs,
    #[serde(rename = "dml-vs-cf")]
    DmlVsCf,
    #[serde(rename = "tmle-vs")]
    TmleVs,
    #[serde(rename = "tmle-vs-cf")]
    TmleVsCf,
}

impl SimEstimator {
    pub const ALL: [SimEstimator; 14] = [
        SimEstimator::Oracle,
        SimEstimator::Qr,
        SimEstimator::QrVs,
        SimEstimator::PlugIn,
        SimEstimator::Dml,
        SimEstimator::DmlCf,
        SimEstimator::Tmle,
        SimEstimator::TmleCf,
        SimEstimator::Tmle1,
        SimEstimator::Tmle1Cf,
        SimEstimator::DmlVs,
        SimEstimator::DmlVsCf,
        SimEstimator::TmleVs,
        SimEstimator::TmleVsCf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimEstimator::Oracle => "oracle",
            SimEstimator::Qr => "qr",
            SimEstimator::QrVs => "qr-vs",
            SimEstimator::PlugIn => "plugin",
            SimEstimator::Dml => "dml",
            SimEstimator::DmlCf => "dml-cf",
            SimEstimator::Tmle => "tmle",
            SimEstimator::TmleCf => "tmle-cf",
            SimEstimator::Tmle1 => "tmle1",
            SimEstimator::Tmle1Cf => "tmle1-cf",
            SimEstimator::DmlVs => "dml-vs",
            SimEstimator::DmlVsCf => "dml-vs-cf",
            SimEstimator::TmleVs => "tmle-vs",
            SimEstimator::TmleVsCf => "tmle-vs-cf",
        }
    }

    /// `(cross-fitted, learner)` of the nuisances it consumes, if any.
    fn nuisance_group(self) -> Option<(bool, QuantileLearner)> {
        use SimEstimator::*;
        match self {
            Oracle | Qr | QrVs => None,
            PlugIn | Dml | Tmle | Tmle1 => Some((false, QuantileLearner::Forest)),
            DmlCf | TmleCf | Tmle1Cf => Some((true, QuantileLearner::Forest)),
            DmlVs | TmleVs => Some((false, QuantileLearner::Stepwise)),
            DmlVsCf | TmleVsCf => Some((true, QuantileLearner::Stepwise)),
        }
    }

    fn engine_kind(self) -> EstimatorKind {
        use SimEstimator::*;
        match self {
            Oracle => EstimatorKind::Oracle,
            Qr => EstimatorKind::Qr,
            QrVs => EstimatorKind::QrVs,
            PlugIn => EstimatorKind::PlugIn,
            Dml | DmlCf => EstimatorKind::Dml,
            Tmle | TmleCf | Tmle1 | Tmle1Cf => EstimatorKind::Tmle,
            DmlVs | DmlVsCf => EstimatorKind::DmlVs,
            TmleVs | TmleVsCf => EstimatorKind::TmleVs,
        }
    }

    fn tmle_mode(self) -> TmleMode {
        match self {
            SimEstimator::Tmle1 | SimEstimator::Tmle1Cf => TmleMode::OneStep,
            _ => TmleMode::IterateToConvergence,
        }
    }
}

impl fmt::Display for SimEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimEstimator {
    type Err = AlqrError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        SimEstimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| AlqrError::InvalidConfig(format!("unknown simulation estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub settings: LearnerSettings,
    /// Folds of the cross-fitted variants.
    pub cf_folds: usize,
    /// Restrict the mean learners of the selection-based estimators to
    /// parametric candidates.
    pub vs_parametric_only: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { threads: None, settings: LearnerSettings::default(), cf_folds: 5, vs_parametric_only: true }
    }
}

/// One replication's result for one (estimator, τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub rep: usize,
    pub psi_hat: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub targeting_residual: Option<f64>,
    pub error: Option<String>,
}

impl McRecord {
    fn ok(rep: usize, out: &EstimatorOutput, truth: f64) -> McRecord {
        if !(out.psi_hat.is_finite() && out.se.is_finite()) {
            return McRecord::failed(rep, "non-finite estimate or standard error".into());
        }
        McRecord {
            rep,
            psi_hat: Some(out.psi_hat),
            se: Some(out.se),
            covered: Some(out.covers(truth)),
            targeting_residual: Some(out.diagnostics.targeting_residual),
            error: None,
        }
    }

    fn failed(rep: usize, error: String) -> McRecord {
        McRecord { rep, psi_hat: None, se: None, covered: None, targeting_residual: None, error: Some(error) }
    }
}

/// Aggregated metrics for one (estimator, τ). Failed replications are
/// excluded from every moment and counted in `n_failures`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: SimEstimator,
    pub tau: f64,
    pub truth: f64,
    pub bias: f64,
    /// Sample standard deviation (n − 1 denominator) of the estimates.
    pub mc_sd: f64,
    pub mean_se: f64,
    pub coverage_95: f64,
    /// Successful replications.
    pub n_reps: usize,
    pub n_failures: usize,
    /// Fewer than two successful replications: `mc_sd` is reported as 0.
    pub degenerate_moments: bool,
    pub mean_abs_targeting_residual: f64,
    pub median_targeting_residual: f64,
    pub median_abs_targeting_residual: f64,
    pub records: Vec<McRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub experiment: ExperimentId,
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, estimator: SimEstimator, tau: f64) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.tau == tau)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Aggregates replication records in replication order.
pub fn summarize_records(estimator: SimEstimator, tau: f64, truth: f64, records: Vec<McRecord>) -> McRow {
    let ok: Vec<&McRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let k = ok.len();
    let kf = k as f64;
    let dev: Vec<f64> = ok.iter().map(|r| r.psi_hat.unwrap() - truth).collect();
    let bias = dev.iter().sum::<f64>() / kf;
    let mc_sd =
        if k >= 2 { (dev.iter().map(|d| (d - bias) * (d - bias)).sum::<f64>() / (kf - 1.0)).sqrt() } else { 0.0 };
    let mean_se = ok.iter().map(|r| r.se.unwrap()).sum::<f64>() / kf;
    let coverage_95 = ok.iter().filter(|r| r.covered == Some(true)).count() as f64 / kf;
    let tr: Vec<f64> = ok.iter().map(|r| r.targeting_residual.unwrap()).collect();
    McRow {
        estimator,
        tau,
        truth,
        bias,
        mc_sd,
        mean_se,
        coverage_95,
        n_reps: k,
        n_failures: records.len() - k,
        degenerate_moments: k < 2,
        mean_abs_targeting_residual: tr.iter().map(|v| v.abs()).sum::<f64>() / kf,
        median_targeting_residual: median(tr.clone()),
        median_abs_targeting_residual: median(tr.iter().map(|v| v.abs()).collect()),
        records,
    }
}

type GroupKey = (bool, QuantileLearner);

fn group_settings(key: GroupKey, opts: &McOptions) -> LearnerSettings {
    let mut s = opts.settings.clone();
    if key.1 == QuantileLearner::Stepwise && opts.vs_parametric_only {
        s.mean_candidates = MeanCandidates::Parametric;
    }
    s
}

fn group_nuisances(
    data: &Dataset,
    key: GroupKey,
    need_h: bool,
    taus: &[f64],
    seed: u64,
    opts: &McOptions,
) -> Result<Vec<NuisanceFits>> {
    let k = if key.0 { opts.cf_folds } else { 1 };
    let plan = make_folds(data, k, seed)?;
    let req = NuisanceRequest { taus, learner: key.1, link: Link::Identity, need_h, seed };
    estimate_nuisances_multi(data, &plan, &group_settings(key, opts), &req)
}

/// Runs every estimator at every τ on one simulated sample. Results are laid
/// out estimator-major.
fn run_replication(
    spec: &DgpSpec,
    estimators: &[SimEstimator],
    taus: &[f64],
    rep: usize,
    master_seed: u64,
    opts: &McOptions,
) -> Vec<McRecord> {
    let rep_seed = derive_seed(master_seed, rep as u64);
    let data = spec.generate(derive_seed(rep_seed, 0)).dataset;
    let learner_seed = derive_seed(rep_seed, 1);
    let floor = opts.settings.density_floor_factor;
    let continuous = data.exposure_kind() == ExposureKind::Continuous;

    let mut groups: Vec<(GroupKey, bool)> = Vec::new();
    for e in estimators {
        if let Some(key) = e.nuisance_group() {
            let need_h =
                e.engine_kind() == EstimatorKind::TmleVs || (e.engine_kind() == EstimatorKind::Tmle && continuous);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some(g) => g.1 |= need_h,
                None => groups.push((key, need_h)),
            }
        }
    }
    let fitted: Vec<(GroupKey, std::result::Result<Vec<NuisanceFits>, String>)> = groups
        .iter()
        .map(|&(key, need_h)| {
            (key, group_nuisances(&data, key, need_h, taus, learner_seed, opts).map_err(|e| e.to_string()))
        })
        .collect();

    let mut out = Vec::with_capacity(estimators.len() * taus.len());
    for &e in estimators {
        for (j, &tau) in taus.iter().enumerate() {
            let truth = true_psi(spec.id, tau);
            let res: Result<EstimatorOutput> = match e {
                SimEstimator::Oracle => oracle_estimate(&data, spec, tau, floor),
                SimEstimator::Qr => naive_qr_estimate(&data, tau, floor),
                SimEstimator::QrVs => qr_vs_estimate(&data, tau, floor),
                _ => {
                    let key = e.nuisance_group().expect("nuisance-based estimator");
                    let (_, fits) = fitted.iter().find(|(k, _)| *k == key).expect("group fitted");
                    match fits {
                        Err(msg) => {
                            out.push(McRecord::failed(rep, msg.clone()));
                            continue;
                        }
                        Ok(fits) => {
                            let mut config = EstimatorConfig::new(tau, e.engine_kind());
                            config.folds = if key.0 { opts.cf_folds } else { 1 };
                            config.seed = learner_seed;
                            config.tmle_mode = e.tmle_mode();
                            config.learners = group_settings(key, opts);
                            estimate_from_nuisances(&data, &fits[j], e.engine_kind(), &config).map(|r| r.output)
                        }
                    }
                }
            };
            out.push(match res {
                Ok(o) => McRecord::ok(rep, &o, truth),
                Err(err) => McRecord::failed(rep, err.to_string()),
            });
        }
    }
    out
}

/// Simulates `reps` samples and summarizes each (estimator, τ).
///
/// Replication `r` draws its data and learner seeds from
/// `derive_seed(master_seed, r)` alone, and results are reduced in
/// replication order, so the summary does not depend on the thread count.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    estimators: &[SimEstimator],
    taus: &[f64],
    reps: usize,
    master_seed: u64,
    opts: &McOptions,
) -> Result<McSummary> {
    if reps == 0 {
        return Err(AlqrError::InvalidConfig("at least one replication is required".into()));
    }
    if estimators.is_empty() || taus.is_empty() {
        return Err(AlqrError::InvalidConfig("no estimators or quantile levels requested".into()));
    }
    for &t in taus {
        crate::model::validate_tau(t)?;
    }
    if opts.cf_folds < 2 {
        return Err(AlqrError::InvalidConfig("cross-fitting needs at least two folds".into()));
    }
    let work = || -> Vec<Vec<McRecord>> {
        (0..reps).into_par_iter().map(|r| run_replication(spec, estimators, taus, r, master_seed, opts)).collect()
    };
    let per_rep = match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| AlqrError::InvalidConfig(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut rows = Vec::with_capacity(estimators.len() * taus.len());
    for (ei, &e) in estimators.iter().enumerate() {
        for (j, &tau) in taus.iter().enumerate() {
            let idx = ei * taus.len() + j;
            let records: Vec<McRecord> = per_rep.iter().map(|rep| rep[idx].clone()).collect();
            rows.push(summarize_records(e, tau, true_psi(spec.id, tau), records));
        }
    }
    if rows.iter().all(|r| r.n_reps == 0) {
        return Err(AlqrError::AllReplicationsFailed { reps });
    }
    Ok(McSummary { experiment: spec.id, n: spec.n, reps, master_seed, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityHistogram {
    pub bins: Vec<HistogramBin>,
    pub draws: usize,
    /// Draws with π(L) < 0.05.
    pub below_005: usize,
    /// Draws with π(L) > 0.95.
    pub above_095: usize,
}

pub const PROPENSITY_BINS: usize = 20;

/// Histogram of the true propensity score over `draws` covariate draws,
/// using 20 equal-width bins on [0, 1].
pub fn propensity_diagnostics(spec: &DgpSpec, draws: usize, seed: u64) -> Result<PropensityHistogram> {
    if spec.id.exposure_kind() != ExposureKind::Binary {
        return Err(AlqrError::NotBinary);
    }
    let mut rng = rng_from_seed(seed);
    let mut counts = [0usize; PROPENSITY_BINS];
    let (mut lo, mut hi) = (0, 0);
    for _ in 0..draws {
        let l = spec.draw_covariates(&mut rng);
        let p = spec.propensity(&l)?;
        let b = ((p * PROPENSITY_BINS as f64) as usize).min(PROPENSITY_BINS - 1);
        counts[b] += 1;
        lo += (p < 0.05) as usize;
        hi += (p > 0.95) as usize;
    }
    let width = 1.0 / PROPENSITY_BINS as f64;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(b, &count)| HistogramBin { lower: b as f64 * width, upper: (b + 1) as f64 * width, count })
        .collect();
    Ok(PropensityHistogram { bins, draws, below_005: lo, above_095: hi })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_names_round_trip() {
        for e in SimEstimator::ALL {
            assert_eq!(e.name().parse::<SimEstimator>().unwrap(), e);
            let json = format!("\"{}\"", e.name());
            assert_eq!(serde_json::from_str::<SimEstimator>(&json).unwrap(), e);
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn failures_are_excluded() {
        let recs = vec![
            McRecord {
                rep: 0,
                psi_hat: Some(2.0),
                se: Some(1.0),
                covered: Some(true),
                targeting_residual: Some(0.0),
                error: None,
            },
            McRecord::failed(1, "boom".into()),
            McRecord {
                rep: 2,
                psi_hat: Some(4.0),
                se: Some(3.0),
                covered: Some(false),
                targeting_residual: Some(0.0),
                error: None,
            },
        ];
        let row = summarize_records(SimEstimator::Dml, 0.5, 1.0, recs);
        assert_eq!(row.n_reps, 2);
        assert_eq!(row.n_failures, 1);
        assert_eq!(row.bias, 2.0);
        assert!((row.mc_sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(row.mean_se, 2.0);
        assert_eq!(row.coverage_95, 0.5);
    }
}

//! Data containers, fold plans, configuration and result types.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{AlqrError, Result};
use crate::linalg::Design;
use crate::rng::{derive_seed, rng_from_seed, STREAM_FOLDS};

/// Two-sided 97.5% standard normal quantile used for every Wald interval.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureKind {
    Binary,
    Continuous,
}

impl From<DMatrix<f64>> for Design {
    fn from(m: DMatrix<f64>) -> Self {
        Design::from_dmatrix(&m)
    }
}

impl From<&DMatrix<f64>> for Design {
    fn from(m: &DMatrix<f64>) -> Self {
        Design::from_dmatrix(m)
    }
}

/// Validated observations `(Y, A, L, weights)`.
///
/// Immutable once built; every constructor path goes through
/// [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<f64>,
    l: Design,
    weights: Vec<f64>,
    exposure_kind: ExposureKind,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        a: Vec<f64>,
        l: impl Into<Design>,
        exposure_kind: ExposureKind,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        validate_dataset(y, a, l.into(), exposure_kind, weights)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of covariate columns.
    pub fn p(&self) -> usize {
        self.l.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn l(&self) -> &Design {
        &self.l
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn exposure_kind(&self) -> ExposureKind {
        self.exposure_kind
    }

    /// Rows `idx`, in order. Skips re-validation: a subset of valid rows is
    /// valid except possibly for the weight sum, which callers guard.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            a: idx.iter().map(|&i| self.a[i]).collect(),
            l: self.l.select_rows(idx),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
            exposure_kind: self.exposure_kind,
        }
    }

    /// Same rows with a replaced outcome vector.
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        validate_dataset(y, self.a.clone(), self.l.clone(), self.exposure_kind, Some(self.weights.clone()))
    }

    /// Features `(a, l₁, …, l_p)` for each row.
    pub fn exposure_covariate_design(&self) -> Design {
        Design::from_fn(self.n(), self.p() + 1, |i, j| if j == 0 { self.a[i] } else { self.l.get(i, j - 1) })
    }
}

/// Checks raw columns and builds a [`Dataset`].
pub fn validate_dataset(
    y: Vec<f64>,
    a: Vec<f64>,
    l: Design,
    exposure_kind: ExposureKind,
    weights: Option<Vec<f64>>,
) -> Result<Dataset> {
    let n = y.len();
    if a.len() != n {
        return Err(AlqrError::LengthMismatch(format!("outcome has {n} rows, exposure has {}", a.len())));
    }
    if l.nrows() != n {
        return Err(AlqrError::LengthMismatch(format!("outcome has {n} rows, covariates have {}", l.nrows())));
    }
    if let Some(w) = &weights {
        if w.len() != n {
            return Err(AlqrError::LengthMismatch(format!("outcome has {n} rows, weights have {}", w.len())));
        }
    }
    if n < 2 {
        return Err(AlqrError::TooFewRows { n, required: 2 });
    }
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(AlqrError::NonFiniteValue { column: "y".into(), row: i });
        }
    }
    for (i, v) in a.iter().enumerate() {
        if !v.is_finite() {
            return Err(AlqrError::NonFiniteValue { column: "a".into(), row: i });
        }
    }
    for i in 0..n {
        for j in 0..l.ncols() {
            if !l.get(i, j).is_finite() {
                return Err(AlqrError::NonFiniteValue { column: format!("l{j}"), row: i });
            }
        }
    }
    if exposure_kind == ExposureKind::Binary {
        for (i, &v) in a.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(AlqrError::NonBinaryExposure { row: i, value: v });
            }
        }
    }
    let weights = match weights {
        None => vec![1.0; n],
        Some(w) => {
            for (i, &v) in w.iter().enumerate() {
                if !v.is_finite() {
                    return Err(AlqrError::NonFiniteValue { column: "weights".into(), row: i });
                }
                if v < 0.0 {
                    return Err(AlqrError::DegenerateWeights(format!("negative weight {v} at row {i}")));
                }
            }
            if !(w.iter().sum::<f64>() > 0.0) {
                return Err(AlqrError::DegenerateWeights("weights sum to zero".into()));
            }
            w
        }
    };
    Ok(Dataset { y, a, l, weights, exposure_kind })
}

/// Assignment of rows to cross-fitting folds (0-based fold labels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub seed: u64,
    /// Binary exposure was stratified by level.
    pub stratified: bool,
    /// Binary exposure with both levels present, but a level had fewer than
    /// `k` rows, so plain random folds were used.
    pub stratification_fallback: bool,
}

impl FoldPlan {
    /// Rows evaluated in fold `f`.
    pub fn eval_rows(&self, f: usize) -> Vec<usize> {
        if self.k == 1 {
            return (0..self.assignments.len()).collect();
        }
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == f).collect()
    }

    /// Rows used to train the learners applied to fold `f`. With `k = 1`
    /// training and evaluation both use every row.
    pub fn train_rows(&self, f: usize) -> Vec<usize> {
        if self.k == 1 {
            return (0..self.assignments.len()).collect();
        }
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != f).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignments {
            s[f] += 1;
        }
        s
    }
}

pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let n = dataset.n();
    if k == 0 {
        return Err(AlqrError::InvalidConfig("fold count must be at least 1".into()));
    }
    if k > n {
        return Err(AlqrError::KTooLarge { k, n });
    }
    let mut rng = rng_from_seed(derive_seed(seed, STREAM_FOLDS));
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut stratified = false;
    let mut fallback = false;
    if dataset.exposure_kind() == ExposureKind::Binary && k > 1 {
        let mut zeros: Vec<usize> = (0..n).filter(|&i| dataset.a()[i] == 0.0).collect();
        let mut ones: Vec<usize> = (0..n).filter(|&i| dataset.a()[i] == 1.0).collect();
        if zeros.len() >= k && ones.len() >= k {
            zeros.shuffle(&mut rng);
            ones.shuffle(&mut rng);
            order.extend(zeros);
            order.extend(ones);
            stratified = true;
        } else {
            fallback = !zeros.is_empty() && !ones.is_empty();
        }
    }
    if !stratified {
        order = (0..n).collect();
        order.shuffle(&mut rng);
    }
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan { assignments, k, seed, stratified, stratification_fallback: fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "plugin")]
    PlugIn,
    #[serde(rename = "dml")]
    Dml,
    #[serde(rename = "tmle")]
    Tmle,
    #[serde(rename = "dml-vs")]
    DmlVs,
    #[serde(rename = "tmle-vs")]
    TmleVs,
    /// Main-effects parametric quantile regression (reference method).
    #[serde(rename = "qr")]
    Qr,
    /// Parametric quantile regression after backward AIC selection.
    #[serde(rename = "qr-vs")]
    QrVs,
    /// Quantile regression on the true basis of a simulation design.
    #[serde(rename = "oracle")]
    Oracle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::PlugIn,
        EstimatorKind::Dml,
        EstimatorKind::Tmle,
        EstimatorKind::DmlVs,
        EstimatorKind::TmleVs,
        EstimatorKind::Qr,
        EstimatorKind::QrVs,
        EstimatorKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::PlugIn => "plugin",
            EstimatorKind::Dml => "dml",
            EstimatorKind::Tmle => "tmle",
            EstimatorKind::DmlVs => "dml-vs",
            EstimatorKind::TmleVs => "tmle-vs",
            EstimatorKind::Qr => "qr",
            EstimatorKind::QrVs => "qr-vs",
            EstimatorKind::Oracle => "oracle",
        }
    }

    /// Uses the stepwise parametric quantile model as its Q learner.
    pub fn uses_selection(self) -> bool {
        matches!(self, EstimatorKind::DmlVs | EstimatorKind::TmleVs | EstimatorKind::QrVs)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = AlqrError;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AlqrError::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TmleMode {
    #[serde(rename = "iterate")]
    IterateToConvergence,
    #[serde(rename = "onestep")]
    OneStep,
}

/// Which candidates the conditional-mean selector may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanCandidates {
    All,
    Parametric,
    Forest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSettings {
    /// Trees in the quantile forest.
    pub num_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈p/3⌉.
    pub mtry: Option<usize>,
    pub subsample: f64,
    /// Trees in the regression-forest candidate of the mean learner.
    pub mean_trees: usize,
    pub mean_candidates: MeanCandidates,
    pub density_floor_factor: f64,
    pub targeting_tol_factor: f64,
    pub max_targeting_iter: usize,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        LearnerSettings {
            num_trees: 500,
            min_leaf: 5,
            mtry: None,
            subsample: 0.5,
            mean_trees: 100,
            mean_candidates: MeanCandidates::All,
            density_floor_factor: 1e-3,
            targeting_tol_factor: 1e-4,
            max_targeting_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub tau: f64,
    pub estimator: EstimatorKind,
    /// Cross-fitting folds; 1 disables cross-fitting.
    pub folds: usize,
    pub seed: u64,
    pub link: crate::engine::Link,
    pub tmle_mode: TmleMode,
    pub learners: LearnerSettings,
}

impl EstimatorConfig {
    pub fn new(tau: f64, estimator: EstimatorKind) -> Self {
        EstimatorConfig {
            tau,
            estimator,
            folds: 5,
            seed: 0,
            link: crate::engine::Link::Identity,
            tmle_mode: TmleMode::IterateToConvergence,
            learners: LearnerSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_tau(self.tau)?;
        if self.folds == 0 {
            return Err(AlqrError::InvalidConfig("folds must be at least 1".into()));
        }
        let s = &self.learners;
        if s.num_trees == 0 || s.mean_trees == 0 {
            return Err(AlqrError::InvalidConfig("forests need at least one tree".into()));
        }
        if s.min_leaf == 0 {
            return Err(AlqrError::InvalidConfig("min_leaf must be at least 1".into()));
        }
        if s.mtry == Some(0) {
            return Err(AlqrError::InvalidConfig("mtry must be at least 1".into()));
        }
        if !(s.subsample > 0.0 && s.subsample <= 1.0) {
            return Err(AlqrError::InvalidConfig("subsample fraction must lie in (0, 1]".into()));
        }
        if !(s.density_floor_factor > 0.0) || !(s.targeting_tol_factor > 0.0) {
            return Err(AlqrError::InvalidConfig("tolerances must be positive".into()));
        }
        if s.max_targeting_iter == 0 {
            return Err(AlqrError::InvalidConfig("max targeting iterations must be positive".into()));
        }
        if self.estimator == EstimatorKind::Oracle {
            return Err(AlqrError::InvalidConfig("the oracle estimator needs a known simulation design".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(AlqrError::InvalidConfig(format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Weighted mean of `w·(τ − I{y ≤ q})` at the final quantile fit.
    pub targeting_residual: f64,
    pub epsilon_trace: Vec<f64>,
    /// |targeting sum| after each accepted update.
    pub s_trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub fold_seed: u64,
    pub folds: usize,
    pub stratified_folds: bool,
    pub density_floored: bool,
}

impl Diagnostics {
    pub fn empty(fold_seed: u64, folds: usize) -> Self {
        Diagnostics {
            targeting_residual: 0.0,
            epsilon_trace: Vec::new(),
            s_trace: Vec::new(),
            n_iterations: 0,
            converged: true,
            fold_seed,
            folds,
            stratified_folds: false,
            density_floored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    pub psi_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub tau: f64,
    pub estimator: EstimatorKind,
    pub diagnostics: Diagnostics,
}

impl EstimatorOutput {
    pub fn new(psi_hat: f64, se: f64, tau: f64, estimator: EstimatorKind, diagnostics: Diagnostics) -> Self {
        debug_assert!(se >= 0.0 || se.is_nan());
        EstimatorOutput {
            psi_hat,
            se,
            ci_low: psi_hat - Z_975 * se,
            ci_high: psi_hat + Z_975 * se,
            tau,
            estimator,
            diagnostics,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(n: usize) -> Dataset {
        let l = Design::from_fn(n, 1, |i, _| i as f64);
        let a = (0..n).map(|i| (i % 2) as f64).collect();
        let y = (0..n).map(|i| i as f64).collect();
        Dataset::new(y, a, l, ExposureKind::Binary, None).unwrap()
    }

    #[test]
    fn minimal_dataset() {
        let d = Dataset::new(
            vec![1.0, 2.0],
            vec![0.0, 1.0],
            Design::from_row_major(2, 1, vec![0.0, 1.0]),
            ExposureKind::Binary,
            None,
        )
        .unwrap();
        assert_eq!(d.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let l = Design::zeros(2, 1);
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0], vec![0.0, 2.0], l.clone(), ExposureKind::Binary, None),
            Err(AlqrError::NonBinaryExposure { row: 1, .. })
        ));
        assert!(matches!(
            Dataset::new(vec![1.0, f64::NAN], vec![0.0, 1.0], l.clone(), ExposureKind::Binary, None),
            Err(AlqrError::NonFiniteValue { row: 1, .. })
        ));
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0], vec![0.0, 1.0], l.clone(), ExposureKind::Binary, Some(vec![0.0, 0.0])),
            Err(AlqrError::DegenerateWeights(_))
        ));
        assert!(matches!(
            Dataset::new(vec![1.0, 2.0, 3.0], vec![0.0, 1.0], l, ExposureKind::Binary, None),
            Err(AlqrError::LengthMismatch(_))
        ));
    }

    #[test]
    fn fold_sizes() {
        let plan = make_folds(&binary(10), 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        let plan = make_folds(&binary(11), 5, 3).unwrap();
        let mut s = plan.fold_sizes();
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(plan, make_folds(&binary(11), 5, 3).unwrap());
        assert!(plan.stratified);
    }

    #[test]
    fn stratification_fallback() {
        let l = Design::zeros(6, 1);
        let d = Dataset::new(vec![0.0; 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], l, ExposureKind::Binary, None).unwrap();
        let plan = make_folds(&d, 3, 0).unwrap();
        assert!(!plan.stratified && plan.stratification_fallback);
        assert!(matches!(make_folds(&d, 7, 0), Err(AlqrError::KTooLarge { k: 7, n: 6 })));
    }

    #[test]
    fn ci_endpoints() {
        let o = EstimatorOutput::new(1.5, 0.2, 0.5, EstimatorKind::Dml, Diagnostics::empty(0, 1));
        assert_eq!(o.ci_low, 1.5 - 1.959964 * 0.2);
        assert_eq!(o.ci_high, 1.5 + 1.959964 * 0.2);
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
    }
}

//! Conditional-mean learner: a discrete cross-validation selector between a
//! (generalized) linear model and a regression forest.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{AlqrError, Result};
use crate::learners::forest::{fit_regression_forest, ForestParams, RegressionForest};
use crate::linalg::{dot, solve_spd, weighted_least_squares, weighted_normal_equations, Design};
use crate::model::MeanCandidates;
use crate::rng::{derive_seed, rng_from_seed};

pub const PROBABILITY_CLIP: f64 = 0.01;
const CV_FOLDS: usize = 5;
const MIN_ROWS_FOR_CV: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanFamily {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanKind {
    Linear,
    Logistic,
    Forest,
}

#[derive(Debug, Clone, PartialEq)]
enum MeanFit {
    /// Coefficients on `[1, features…]`.
    Linear(Vec<f64>),
    Logistic(Vec<f64>),
    Forest(RegressionForest),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanModel {
    pub kind: MeanKind,
    pub family: MeanFamily,
    pub cv_risk: f64,
    fit: MeanFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanLearnerOptions {
    pub candidates: MeanCandidates,
    pub forest: ForestParams,
}

impl Default for MeanLearnerOptions {
    fn default() -> Self {
        MeanLearnerOptions {
            candidates: MeanCandidates::All,
            forest: ForestParams { num_trees: 100, ..ForestParams::default() },
        }
    }
}

impl MeanModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let raw = match &self.fit {
            MeanFit::Linear(b) => b[0] + dot(&b[1..], row),
            MeanFit::Logistic(b) => sigmoid(b[0] + dot(&b[1..], row)),
            MeanFit::Forest(f) => f.predict(row),
        };
        match self.family {
            MeanFamily::Binary => raw.clamp(PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP),
            MeanFamily::Continuous => raw,
        }
    }

    pub fn predict_all(&self, x: &Design) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict(x.row(i))).collect()
    }
}

pub fn mean_predict(model: &MeanModel, row: &[f64]) -> f64 {
    model.predict(row)
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn fit_linear(x: &Design, target: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    weighted_least_squares(&x.with_intercept(), target, w)
        .map_err(|_| AlqrError::SingularDesign("linear mean model".into()))
}

/// Weighted logistic regression by iteratively reweighted least squares with
/// step halving.
fn fit_logistic(x: &Design, target: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let xi = x.with_intercept();
    let n = xi.nrows();
    let p = xi.ncols();
    let deviance = |beta: &[f64]| -> f64 {
        let mut d = 0.0;
        for i in 0..n {
            let mu = sigmoid(dot(xi.row(i), beta)).clamp(1e-15, 1.0 - 1e-15);
            d -= 2.0 * w[i] * (target[i] * mu.ln() + (1.0 - target[i]) * (1.0 - mu).ln());
        }
        d
    };
    let mut beta = vec![0.0; p];
    let mut dev = deviance(&beta);
    for iter in 0..100 {
        let mut z = vec![0.0; n];
        let mut wz = vec![0.0; n];
        for i in 0..n {
            let eta = dot(xi.row(i), &beta);
            let mu = sigmoid(eta).clamp(1e-10, 1.0 - 1e-10);
            let v = mu * (1.0 - mu);
            wz[i] = w[i] * v;
            z[i] = eta + (target[i] - mu) / v;
        }
        let (xtx, xtz) = weighted_normal_equations(&xi, &z, &wz);
        let proposal: Vec<f64> = match solve_spd(xtx, &xtz, "logistic mean model") {
            Ok(b) => b.iter().copied().collect(),
            // Quasi-separation drives the working weights to zero; keep the
            // last finite iterate once at least one step succeeded.
            Err(e) if iter == 0 => return Err(e),
            Err(_) => break,
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = beta.iter().zip(&proposal).map(|(b, p)| b + step * (p - b)).collect();
            let d = deviance(&cand);
            if d.is_finite() && d <= dev + 1e-12 * dev.abs() {
                accepted = Some((cand, d));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, d)) = accepted else { break };
        let change = (dev - d).abs();
        beta = cand;
        dev = d;
        if change < 1e-10 * (dev.abs() + 0.1) {
            break;
        }
    }
    Ok(beta)
}

fn fit_candidate(
    kind: MeanKind,
    x: &Design,
    target: &[f64],
    w: &[f64],
    opts: &MeanLearnerOptions,
    seed: u64,
) -> Result<MeanFit> {
    match kind {
        MeanKind::Linear => fit_linear(x, target, w).map(MeanFit::Linear),
        MeanKind::Logistic => fit_logistic(x, target, w).map(MeanFit::Logistic),
        MeanKind::Forest => fit_regression_forest(x, target, w, &opts.forest, seed).map(MeanFit::Forest),
    }
}

fn risk(model: &MeanModel, x: &Design, target: &[f64], w: &[f64], rows: &[usize]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &i in rows {
        let e = target[i] - model.predict(x.row(i));
        num += w[i] * e * e;
        den += w[i];
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Fits every allowed candidate, scores it by 5-fold cross-validated
/// (weighted) squared error and refits the winner on all rows. Below ten rows
/// only the parametric candidate is used.
pub fn fit_mean_learner(
    features: &Design,
    target: &[f64],
    family: MeanFamily,
    weights: &[f64],
    seed: u64,
    opts: &MeanLearnerOptions,
) -> Result<MeanModel> {
    let n = features.nrows();
    if target.len() != n || weights.len() != n {
        return Err(AlqrError::LengthMismatch("mean learner inputs disagree".into()));
    }
    let parametric = match family {
        MeanFamily::Continuous => MeanKind::Linear,
        MeanFamily::Binary => MeanKind::Logistic,
    };
    let mut kinds = match opts.candidates {
        MeanCandidates::All => vec![parametric, MeanKind::Forest],
        MeanCandidates::Parametric => vec![parametric],
        MeanCandidates::Forest => vec![MeanKind::Forest],
    };
    let all_rows: Vec<usize> = (0..n).collect();
    let mut failures = Vec::new();

    if n < MIN_ROWS_FOR_CV && kinds.contains(&parametric) {
        kinds = vec![parametric];
    }
    if kinds.len() == 1 {
        let kind = kinds[0];
        let fit = fit_candidate(kind, features, target, weights, opts, derive_seed(seed, 99))
            .map_err(|e| AlqrError::AllLearnersFailed(e.to_string()))?;
        let mut model = MeanModel { kind, family, cv_risk: 0.0, fit };
        model.cv_risk = risk(&model, features, target, weights, &all_rows);
        return Ok(model);
    }

    let mut order = all_rows.clone();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, 0)));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % CV_FOLDS;
    }
    let mut best: Option<(f64, MeanKind)> = None;
    'cand: for &kind in &kinds {
        let (mut num, mut den) = (0.0, 0.0);
        for f in 0..CV_FOLDS {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let xt = features.select_rows(&train);
            let tt: Vec<f64> = train.iter().map(|&i| target[i]).collect();
            let wt: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
            let fit = match fit_candidate(kind, &xt, &tt, &wt, opts, derive_seed(seed, 10 + f as u64)) {
                Ok(fit) => fit,
                Err(e) => {
                    failures.push(format!("{kind:?}: {e}"));
                    continue 'cand;
                }
            };
            let m = MeanModel { kind, family, cv_risk: 0.0, fit };
            let tw: f64 = test.iter().map(|&i| weights[i]).sum();
            num += risk(&m, features, target, weights, &test) * tw;
            den += tw;
        }
        let r = if den > 0.0 { num / den } else { 0.0 };
        if best.is_none_or(|(br, _)| r < br) {
            best = Some((r, kind));
        }
    }
    let (cv_risk, kind) = best.ok_or_else(|| AlqrError::AllLearnersFailed(failures.join("; ")))?;
    let fit = fit_candidate(kind, features, target, weights, opts, derive_seed(seed, 99))
        .map_err(|e| AlqrError::AllLearnersFailed(e.to_string()))?;
    Ok(MeanModel { kind, family, cv_risk, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_target_selects_linear() {
        let n = 300;
        let x = Design::from_fn(n, 2, |i, j| ((i * (7 + j * 5)) % 101) as f64 / 10.0);
        let target: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x.get(i, 0) - 0.5 * x.get(i, 1)).collect();
        let opts =
            MeanLearnerOptions { forest: ForestParams { num_trees: 20, ..Default::default() }, ..Default::default() };
        let m = fit_mean_learner(&x, &target, MeanFamily::Continuous, &vec![1.0; n], 1, &opts).unwrap();
        assert_eq!(m.kind, MeanKind::Linear);
        for i in 0..n {
            assert!((m.predict(x.row(i)) - target[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_binary_is_clipped() {
        let n = 50;
        let x = Design::from_fn(n, 1, |i, _| i as f64);
        let opts =
            MeanLearnerOptions { forest: ForestParams { num_trees: 10, ..Default::default() }, ..Default::default() };
        let m = fit_mean_learner(&x, &vec![1.0; n], MeanFamily::Binary, &vec![1.0; n], 1, &opts).unwrap();
        assert_eq!(m.predict(&[3.0]), 0.99);
    }

    #[test]
    fn small_samples_fall_back() {
        let x = Design::from_fn(5, 1, |i, _| i as f64);
        let m =
            fit_mean_learner(&x, &[1.0, 2.0, 2.5, 4.0, 5.0], MeanFamily::Continuous, &[1.0; 5], 0, &Default::default())
                .unwrap();
        assert_eq!(m.kind, MeanKind::Linear);
        assert!(m.cv_risk >= 0.0);
    }

    #[test]
    fn logistic_recovers_coefficients() {
        let n = 4000;
        let x = Design::from_fn(n, 1, |i, _| (i as f64 / n as f64) * 6.0 - 3.0);
        // Deterministic "draws": quasi-random uniform sequence.
        let target: Vec<f64> = (0..n)
            .map(|i| {
                let u = ((i as f64) * 0.618_033_988_749_895).fract();
                (u < sigmoid(0.5 + 1.5 * x.get(i, 0))) as u8 as f64
            })
            .collect();
        let b = fit_logistic(&x, &target, &vec![1.0; n]).unwrap();
        assert!((b[0] - 0.5).abs() < 0.15, "{b:?}");
        assert!((b[1] - 1.5).abs() < 0.15, "{b:?}");
    }
}

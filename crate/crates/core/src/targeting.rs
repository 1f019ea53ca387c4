//! Targeted updates of the quantile fit.
//!
//! The estimating equation targeted here is
//! `S(ε) = Σ ωᵢ wᵢ (τ − I{yᵢ ≤ q̃ᵢ + ε wᵢ}) / Σ ωᵢ = 0` with clever covariate
//! `w = (A − m)/d`. `S` is piecewise constant in ε, so the update step is
//! found by an exact scan over its breakpoints rather than a numeric
//! minimizer.

use crate::engine::estimators::{base_diagnostics, clever_weights, eif_solution, se_from_influence};
use crate::engine::{estimate_nuisances_multi, Link, NuisanceFits, NuisanceRequest, QuantileLearner};
use crate::error::{AlqrError, Result};
use crate::learners::density::{density_floor, residual_density_at_quantile};
use crate::model::{
    make_folds, Dataset, EstimatorConfig, EstimatorKind, EstimatorOutput, ExposureKind, LearnerSettings, TmleMode,
};

#[inline]
pub fn clever_covariate(a: f64, m: f64, d: f64) -> f64 {
    (a - m) / d
}

/// `Σ ω w (τ − I{y ≤ q}) / Σ ω`.
pub fn targeting_sum(y: &[f64], q: &[f64], w: &[f64], tau: f64, weights: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        let ind = if y[i] <= q[i] { 1.0 } else { 0.0 };
        num += weights[i] * w[i] * (tau - ind);
        den += weights[i];
    }
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSolution {
    pub epsilon: f64,
    /// `|S(ε)|` evaluated directly at the returned ε.
    pub abs_sum: f64,
}

/// Global minimizer of `|S(ε)|` over ℝ.
pub fn solve_epsilon(y: &[f64], q: &[f64], w: &[f64], tau: f64, weights: &[f64]) -> Result<f64> {
    Ok(solve_epsilon_detail(y, q, w, tau, weights)?.epsilon)
}

/// Breakpoint scan for [`solve_epsilon`].
///
/// With breakpoints `bᵢ = (yᵢ − qᵢ)/wᵢ` the indicator of row i is on for
/// `ε ≥ bᵢ` when `wᵢ > 0` and for `ε ≤ bᵢ` when `wᵢ < 0`. A sweep over the
/// sorted distinct breakpoints gives S on every breakpoint and every open
/// interval between them; each interval is represented by 0 when it contains
/// 0, by its midpoint otherwise, and the two unbounded ends by points one
/// unit (or one breakpoint magnitude) beyond the extreme breakpoints. The
/// candidates whose swept |S| is within rounding of the minimum are
/// re-evaluated directly; ties prefer the smallest |ε|, then the smallest ε.
pub fn solve_epsilon_detail(y: &[f64], q: &[f64], w: &[f64], tau: f64, weights: &[f64]) -> Result<EpsilonSolution> {
    let n = y.len();
    let total: f64 = weights.iter().sum();
    let mut bps: Vec<(f64, f64)> = Vec::with_capacity(n); // (breakpoint, contribution c = ω w / Σω)
    let mut start = 0.0;
    for i in 0..n {
        if w[i] == 0.0 || weights[i] == 0.0 {
            continue;
        }
        let c = weights[i] * w[i] / total;
        let b = (y[i] - q[i]) / w[i];
        start += if w[i] > 0.0 { c * tau } else { c * (tau - 1.0) };
        bps.push((b, c));
    }
    if bps.is_empty() {
        return Err(AlqrError::AllZeroCleverCovariates);
    }
    bps.sort_by(|a, b| a.0.total_cmp(&b.0));
    let scale: f64 = bps.iter().map(|(_, c)| c.abs()).sum();

    // Sweep: (candidate ε, swept S).
    let mut cands: Vec<(f64, f64)> = Vec::with_capacity(2 * bps.len() + 1);
    let u1 = bps[0].0;
    cands.push((if 0.0 < u1 { 0.0 } else { u1 - u1.abs().max(1.0) }, start));
    let mut cur = start;
    let mut k = 0;
    while k < bps.len() {
        let u = bps[k].0;
        let mut at = cur;
        let mut after = cur;
        while k < bps.len() && bps[k].0 == u {
            let c = bps[k].1;
            if c > 0.0 {
                at -= c;
                after -= c;
            } else {
                after += c;
            }
            k += 1;
        }
        cands.push((u, at));
        let rep = if k < bps.len() {
            let next = bps[k].0;
            if u < 0.0 && 0.0 < next {
                0.0
            } else {
                0.5 * (u + next)
            }
        } else if 0.0 > u {
            0.0
        } else {
            u + u.abs().max(1.0)
        };
        cands.push((rep, after));
        cur = after;
    }

    let min_swept = cands.iter().fold(f64::INFINITY, |m, c| m.min(c.1.abs()));
    let slack = 1e-9 * scale + 1e-300;
    let mut best: Option<EpsilonSolution> = None;
    for &(eps, swept) in &cands {
        if swept.abs() > min_swept + slack {
            continue;
        }
        let s = shifted_sum(y, q, w, tau, weights, eps).abs();
        let better = match best {
            None => true,
            Some(b) => {
                let tie = 1e-12 * scale;
                if s < b.abs_sum - tie {
                    true
                } else if s > b.abs_sum + tie {
                    false
                } else {
                    eps.abs() < b.epsilon.abs() || (eps.abs() == b.epsilon.abs() && eps < b.epsilon)
                }
            }
        };
        if better {
            best = Some(EpsilonSolution { epsilon: eps, abs_sum: s });
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

/// `S(ε)` by direct evaluation.
pub fn shifted_sum(y: &[f64], q: &[f64], w: &[f64], tau: f64, weights: &[f64], eps: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        let ind = if y[i] <= q[i] + eps * w[i] { 1.0 } else { 0.0 };
        num += weights[i] * w[i] * (tau - ind);
        den += weights[i];
    }
    num / den
}

/// Trace of an iterative targeting run.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetingState {
    pub q_tilde: Vec<f64>,
    pub epsilon_trace: Vec<f64>,
    /// |S| after each accepted update.
    pub s_trace: Vec<f64>,
    pub converged: bool,
    /// Clever covariates of the final accepted step.
    pub w: Vec<f64>,
}

fn weighted_mean_abs(x: &[f64], w: &[f64]) -> f64 {
    let (mut s, mut sw) = (0.0, 0.0);
    for (v, wi) in x.iter().zip(w) {
        s += wi * v.abs();
        sw += wi;
    }
    s / sw
}

/// Iterative TMLE for a binary exposure. Returns the output, the influence
/// values at the targeted nuisances, and the targeting trace.
pub fn tmle_binary_with_influence(
    dataset: &Dataset,
    nuisances: &NuisanceFits,
    tau: f64,
    link: Link,
    settings: &LearnerSettings,
    mode: TmleMode,
) -> Result<(EstimatorOutput, Vec<f64>, TargetingState)> {
    if dataset.exposure_kind() != ExposureKind::Binary {
        return Err(AlqrError::InvalidConfig("binary targeting needs a binary exposure".into()));
    }
    let (Some(q1), Some(q0)) = (&nuisances.q1, &nuisances.q0) else {
        return Err(AlqrError::InvalidConfig("binary targeting needs counterfactual quantiles".into()));
    };
    let (y, a, om) = (dataset.y(), dataset.a(), dataset.weights());
    let m = &nuisances.m;
    let n = dataset.n();
    let mut q1t = q1.clone();
    let mut q0t = q0.clone();
    let mut qt = nuisances.q.clone();
    let mut d_cur = nuisances.d.clone();
    let mut d_final = d_cur.clone();
    let mut w_final = clever_weights(dataset, nuisances, &qt, link);
    let floor = density_floor(y, om, settings.density_floor_factor);

    let mut eps_trace = Vec::new();
    let mut s_trace = Vec::new();
    let mut converged = false;
    let mut floored = nuisances.density_floored;
    let mut iter = 0;
    while iter < settings.max_targeting_iter {
        if iter > 0 {
            let resid: Vec<f64> = (0..n).map(|i| y[i] - qt[i]).collect();
            let dens = residual_density_at_quantile(&resid, om, floor, None)?;
            floored |= dens.floored;
            d_cur = vec![dens.value_at_zero; n];
        }
        let wv: Vec<f64> = (0..n).map(|i| (a[i] - m[i]) * link.g_prime(qt[i]) / d_cur[i]).collect();
        let tol = settings.targeting_tol_factor * weighted_mean_abs(&wv, om);
        let s_now = targeting_sum(y, &qt, &wv, tau, om).abs();
        if s_now <= tol {
            converged = true;
            d_final = d_cur;
            w_final = wv;
            break;
        }
        let sol = solve_epsilon_detail(y, &qt, &wv, tau, om)?;
        if !(sol.abs_sum < s_now) {
            break;
        }
        let eps = sol.epsilon;
        for i in 0..n {
            q1t[i] += eps * (1.0 - m[i]) * link.g_prime(q1t[i]) / d_cur[i];
            q0t[i] += eps * (0.0 - m[i]) * link.g_prime(q0t[i]) / d_cur[i];
            qt[i] = if a[i] == 1.0 { q1t[i] } else { q0t[i] };
        }
        eps_trace.push(eps);
        s_trace.push(sol.abs_sum);
        d_final = d_cur.clone();
        w_final = wv;
        iter += 1;
        if sol.abs_sum <= tol {
            converged = true;
            break;
        }
        if mode == TmleMode::OneStep {
            break;
        }
    }

    let vg: Vec<f64> = (0..n).map(|i| link.g(q1t[i]) * m[i] + link.g(q0t[i]) * (1.0 - m[i])).collect();
    if link == Link::Log {
        for (i, &v) in qt.iter().enumerate() {
            if !(v > 0.0) {
                return Err(AlqrError::NonPositiveQuantile { row: i, value: v });
            }
        }
    }
    let (psi, phi) = eif_solution(dataset, m, &qt, &vg, &d_final, tau, link)?;
    let w_report: Vec<f64> = (0..n).map(|i| (a[i] - m[i]) * link.g_prime(qt[i]) / d_final[i]).collect();
    let mut diag = base_diagnostics(nuisances);
    diag.targeting_residual = targeting_sum(y, &qt, &w_report, tau, om);
    diag.epsilon_trace = eps_trace.clone();
    diag.s_trace = s_trace.clone();
    diag.n_iterations = iter;
    diag.converged = converged;
    diag.density_floored = floored;
    let out = EstimatorOutput::new(psi, se_from_influence(&phi, om), tau, EstimatorKind::Tmle, diag);
    let state = TargetingState { q_tilde: qt, epsilon_trace: eps_trace, s_trace, converged, w: w_final };
    Ok((out, phi, state))
}

pub fn tmle_binary(
    dataset: &Dataset,
    nuisances: &NuisanceFits,
    tau: f64,
    config: &EstimatorConfig,
) -> Result<EstimatorOutput> {
    Ok(tmle_binary_with_influence(dataset, nuisances, tau, config.link, &config.learners, config.tmle_mode)?.0)
}

/// One-step TMLE using the auxiliary regression `ĥ = Ê[w|L]`:
/// `q̃ = q̂ + εw`, `ṽ = v̂ + εĥ`, density frozen.
pub fn one_step_with_influence(
    dataset: &Dataset,
    nuisances: &NuisanceFits,
    tau: f64,
    link: Link,
    settings: &LearnerSettings,
    kind: EstimatorKind,
) -> Result<(EstimatorOutput, Vec<f64>)> {
    if link != Link::Identity {
        return Err(AlqrError::UnsupportedLink("one-step targeting with an auxiliary regression".into()));
    }
    let h = nuisances.h.as_ref().ok_or_else(|| AlqrError::InvalidConfig("one-step targeting needs Ê[w|L]".into()))?;
    let (y, a, om) = (dataset.y(), dataset.a(), dataset.weights());
    let n = dataset.n();
    let m = &nuisances.m;
    let wv: Vec<f64> = (0..n).map(|i| clever_covariate(a[i], m[i], nuisances.d[i])).collect();
    let sol = solve_epsilon_detail(y, &nuisances.q, &wv, tau, om)?;
    let eps = sol.epsilon;
    let qt: Vec<f64> = (0..n).map(|i| nuisances.q[i] + eps * wv[i]).collect();
    let vt: Vec<f64> = (0..n).map(|i| nuisances.v[i] + eps * h[i]).collect();
    let (psi, phi) = eif_solution(dataset, m, &qt, &vt, &nuisances.d, tau, Link::Identity)?;
    let tol = settings.targeting_tol_factor * weighted_mean_abs(&wv, om);
    let mut diag = base_diagnostics(nuisances);
    diag.targeting_residual = targeting_sum(y, &qt, &wv, tau, om);
    diag.epsilon_trace = vec![eps];
    diag.s_trace = vec![sol.abs_sum];
    diag.n_iterations = 1;
    diag.converged = sol.abs_sum <= tol;
    let out = EstimatorOutput::new(psi, se_from_influence(&phi, om), tau, kind, diag);
    Ok((out, phi))
}

pub fn tmle_continuous_onestep(
    dataset: &Dataset,
    nuisances: &NuisanceFits,
    tau: f64,
    config: &EstimatorConfig,
) -> Result<EstimatorOutput> {
    if dataset.exposure_kind() != ExposureKind::Continuous {
        return Err(AlqrError::InvalidConfig("continuous targeting needs a continuous exposure".into()));
    }
    Ok(one_step_with_influence(dataset, nuisances, tau, config.link, &config.learners, EstimatorKind::Tmle)?.0)
}

fn vs_nuisances(dataset: &Dataset, config: &EstimatorConfig, need_h: bool) -> Result<NuisanceFits> {
    config.validate()?;
    if config.link != Link::Identity {
        return Err(AlqrError::UnsupportedLink("estimators after variable selection".into()));
    }
    let plan = make_folds(dataset, config.folds, config.seed)?;
    let req = NuisanceRequest {
        taus: &[config.tau],
        learner: QuantileLearner::Stepwise,
        link: Link::Identity,
        need_h,
        seed: config.seed,
    };
    Ok(estimate_nuisances_multi(dataset, &plan, &config.learners, &req)?.remove(0))
}

/// Targeted estimator built on the stepwise parametric quantile model.
pub fn tmle_vs(dataset: &Dataset, config: &EstimatorConfig) -> Result<EstimatorOutput> {
    let n = vs_nuisances(dataset, config, true)?;
    Ok(one_step_with_influence(dataset, &n, config.tau, Link::Identity, &config.learners, EstimatorKind::TmleVs)?.0)
}

/// Debiased estimator built on the stepwise parametric quantile model.
pub fn dml_vs(dataset: &Dataset, config: &EstimatorConfig) -> Result<EstimatorOutput> {
    let n = vs_nuisances(dataset, config, false)?;
    let mut out = crate::engine::dml_estimate(&n, dataset, config.tau, Link::Identity)?;
    out.estimator = EstimatorKind::DmlVs;
    Ok(out)
}

use crate::engine::{Link, NuisanceFits};
use crate::error::{AlqrError, Result};
use crate::model::{Dataset, Diagnostics, EstimatorKind, EstimatorOutput};
use crate::stats::weighted_variance;
use crate::targeting::targeting_sum;

/// One observation's inputs to the influence function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EifRow {
    pub y: f64,
    pub a: f64,
    pub m: f64,
    pub q: f64,
    /// `E[g(Q)|L]`; equals `v` under the identity link.
    pub v_g: f64,
    pub d: f64,
}

/// Weighted mean of `(a − m)²` after checking it against `10⁻⁸·Var(a)`.
pub fn denominator(a: &[f64], m: &[f64], w: &[f64]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..a.len() {
        let e = a[i] - m[i];
        num += w[i] * e * e;
        den += w[i];
    }
    let value = num / den;
    let threshold = 1e-8 * weighted_variance(a, w);
    if !(value > threshold) || !(value > 0.0) {
        return Err(AlqrError::DegenerateExposureVariance { value, threshold });
    }
    Ok(value)
}

/// Efficient influence function of Ψ_τ at one observation:
/// `(a−m)/denom · [g(q) − v_g + (τ − I{y ≤ q})·g′(q)/d − ψ(a−m)]`.
pub fn eif_evaluate(row: &EifRow, psi: f64, tau: f64, denom: f64, link: Link) -> Result<f64> {
    if link == Link::Log && !(row.q > 0.0) {
        return Err(AlqrError::NonPositiveQuantile { row: 0, value: row.q });
    }
    let e = row.a - row.m;
    let ind = if row.y <= row.q { 1.0 } else { 0.0 };
    Ok(e / denom * (link.g(row.q) - row.v_g + (tau - ind) * link.g_prime(row.q) / row.d - psi * e))
}

/// `√(Σ w²φ²) / Σ w`.
pub fn se_from_influence(phi: &[f64], w: &[f64]) -> f64 {
    let mut s2 = 0.0;
    let mut sw = 0.0;
    for (p, wi) in phi.iter().zip(w) {
        s2 += wi * wi * p * p;
        sw += wi;
    }
    s2.sqrt() / sw
}

/// Weighted mean of influence values.
pub fn weighted_mean_influence(phi: &[f64], w: &[f64]) -> f64 {
    crate::stats::weighted_mean(phi, w)
}

fn check_log_positive(q: &[f64]) -> Result<()> {
    for (i, &v) in q.iter().enumerate() {
        if !(v > 0.0) {
            return Err(AlqrError::NonPositiveQuantile { row: i, value: v });
        }
    }
    Ok(())
}

fn v_g(n: &NuisanceFits, link: Link) -> Result<&[f64]> {
    match link {
        Link::Identity => Ok(&n.v),
        Link::Log => n
            .v_log
            .as_deref()
            .ok_or_else(|| AlqrError::InvalidConfig("log link requested but nuisances lack E[log Q|L]".into())),
    }
}

pub(crate) fn base_diagnostics(n: &NuisanceFits) -> Diagnostics {
    let mut d = Diagnostics::empty(n.fold_seed, n.folds);
    d.stratified_folds = n.stratified;
    d.density_floored = n.density_floored;
    d
}

/// Clever covariates including the link derivative, `(a − m)·g′(q)/d`.
pub(crate) fn clever_weights(dataset: &Dataset, n: &NuisanceFits, q: &[f64], link: Link) -> Vec<f64> {
    (0..dataset.n()).map(|i| (dataset.a()[i] - n.m[i]) * link.g_prime(q[i]) / n.d[i]).collect()
}

/// `Σw(a−m)(q−v) / Σw(a−m)²`.
pub fn plugin_estimate(nuisances: &NuisanceFits, dataset: &Dataset) -> Result<f64> {
    Ok(plugin_estimate_with_influence(nuisances, dataset, Link::Identity)?.0.psi_hat)
}

/// Plug-in estimate with its standard error. The influence values used here
/// omit the density correction term, so they have weighted mean zero at the
/// plug-in estimate by construction.
pub fn plugin_estimate_with_influence(
    n: &NuisanceFits,
    dataset: &Dataset,
    link: Link,
) -> Result<(EstimatorOutput, Vec<f64>)> {
    let (a, w) = (dataset.a(), dataset.weights());
    let denom = denominator(a, &n.m, w)?;
    if link == Link::Log {
        check_log_positive(&n.q)?;
    }
    let vg = v_g(n, link)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..dataset.n() {
        let e = a[i] - n.m[i];
        num += w[i] * e * (link.g(n.q[i]) - vg[i]);
        den += w[i] * e * e;
    }
    let psi = num / den;
    let phi: Vec<f64> = (0..dataset.n())
        .map(|i| {
            let e = a[i] - n.m[i];
            e / denom * (link.g(n.q[i]) - vg[i] - psi * e)
        })
        .collect();
    let mut diag = base_diagnostics(n);
    let wc = clever_weights(dataset, n, &n.q, link);
    diag.targeting_residual = targeting_sum(dataset.y(), &n.q, &wc, n.tau, w);
    let out = EstimatorOutput::new(psi, se_from_influence(&phi, w), n.tau, EstimatorKind::PlugIn, diag);
    Ok((out, phi))
}

/// Debiased estimator solving the efficient-influence-function equation.
pub fn dml_estimate(nuisances: &NuisanceFits, dataset: &Dataset, tau: f64, link: Link) -> Result<EstimatorOutput> {
    Ok(dml_estimate_with_influence(nuisances, dataset, tau, link)?.0)
}

pub fn dml_estimate_with_influence(
    n: &NuisanceFits,
    dataset: &Dataset,
    tau: f64,
    link: Link,
) -> Result<(EstimatorOutput, Vec<f64>)> {
    if link == Link::Log {
        check_log_positive(&n.q)?;
    }
    let vg = v_g(n, link)?;
    let (psi, phi) = eif_solution(dataset, &n.m, &n.q, vg, &n.d, tau, link)?;
    let mut diag = base_diagnostics(n);
    let wc = clever_weights(dataset, n, &n.q, link);
    diag.targeting_residual = targeting_sum(dataset.y(), &n.q, &wc, tau, dataset.weights());
    let out = EstimatorOutput::new(psi, se_from_influence(&phi, dataset.weights()), tau, EstimatorKind::Dml, diag);
    Ok((out, phi))
}

/// Solves `Σ w φ_ψ = 0` for ψ (closed form) and returns the influence values
/// at the solution.
pub(crate) fn eif_solution(
    dataset: &Dataset,
    m: &[f64],
    q: &[f64],
    vg: &[f64],
    d: &[f64],
    tau: f64,
    link: Link,
) -> Result<(f64, Vec<f64>)> {
    let (y, a, w) = (dataset.y(), dataset.a(), dataset.weights());
    let denom = denominator(a, m, w)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..dataset.n() {
        let e = a[i] - m[i];
        let ind = if y[i] <= q[i] { 1.0 } else { 0.0 };
        num += w[i] * e * (link.g(q[i]) - vg[i] + (tau - ind) * link.g_prime(q[i]) / d[i]);
        den += w[i] * e * e;
    }
    let psi = num / den;
    let mut phi = Vec::with_capacity(dataset.n());
    for i in 0..dataset.n() {
        let row = EifRow { y: y[i], a: a[i], m: m[i], q: q[i], v_g: vg[i], d: d[i] };
        phi.push(eif_evaluate(&row, psi, tau, denom, link)?);
    }
    Ok((psi, phi))
}

/// `Σw·π(1−π)(q1−q0) / Σw·π(1−π)`.
pub fn binary_weighted_estimand(q1: &[f64], q0: &[f64], pi: &[f64], weights: &[f64]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..q1.len() {
        let k = weights[i] * pi[i] * (1.0 - pi[i]);
        num += k * (q1[i] - q0[i]);
        den += k;
    }
    if !(den > 0.0) {
        return Err(AlqrError::DegeneratePropensity);
    }
    Ok(num / den)
}

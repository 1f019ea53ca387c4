//! Parametric reference estimators used as simulation benchmarks.

use crate::error::Result;
use crate::learners::density::{density_floor, parametric_residual_density};
use crate::learners::qr::{fit_parametric_qr, qr_sandwich_se};
use crate::learners::stepwise::{fit_exposure_qr, stepwise_qr_aic};
use crate::linalg::{dot, Design};
use crate::model::{Dataset, Diagnostics, EstimatorKind, EstimatorOutput};
use crate::simulation::dgp::DgpSpec;

/// Linear quantile regression of `y` on `x` (exposure in column 1); the SE is
/// the usual sandwich with the kernel residual density plugged in.
pub fn design_qr_output(
    x: &Design,
    dataset: &Dataset,
    tau: f64,
    kind: EstimatorKind,
    floor_factor: f64,
) -> Result<EstimatorOutput> {
    let (y, w) = (dataset.y(), dataset.weights());
    let sol = fit_parametric_qr(x, y, tau, w)?;
    let resid: Vec<f64> = (0..dataset.n()).map(|i| y[i] - dot(x.row(i), &sol.coefficients)).collect();
    let floor = density_floor(y, w, floor_factor);
    let dens = parametric_residual_density(&resid, w, &sol.basis, floor)?;
    let se = qr_sandwich_se(x, w, tau, dens.value_at_zero)?;
    let mut diag = Diagnostics::empty(0, 1);
    diag.density_floored = dens.floored;
    Ok(EstimatorOutput::new(sol.coefficients[1], se[1], tau, kind, diag))
}

/// Quantile regression on the design's true basis.
pub fn oracle_estimate(dataset: &Dataset, spec: &DgpSpec, tau: f64, floor_factor: f64) -> Result<EstimatorOutput> {
    design_qr_output(&spec.oracle_design(dataset), dataset, tau, EstimatorKind::Oracle, floor_factor)
}

/// Quantile regression on `(1, A, L)` main effects.
pub fn naive_qr_estimate(dataset: &Dataset, tau: f64, floor_factor: f64) -> Result<EstimatorOutput> {
    let all: Vec<usize> = (0..dataset.p()).collect();
    let fit = fit_exposure_qr(dataset, tau, &all, true)?;
    crate::estimate::qr_output(&fit, dataset, tau, EstimatorKind::Qr, floor_factor)
}

/// Main-effects quantile regression after backward AIC selection of the
/// covariates (exposure forced in); naive SE ignoring the selection step.
pub fn qr_vs_estimate(dataset: &Dataset, tau: f64, floor_factor: f64) -> Result<EstimatorOutput> {
    let fit = stepwise_qr_aic(dataset, tau, true)?;
    crate::estimate::qr_output(&fit, dataset, tau, EstimatorKind::QrVs, floor_factor)
}

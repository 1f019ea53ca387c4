//! Parametric quantile model `Q_τ(Y|A,L) = β A + αᵀL*` with backward AIC
//! selection of the covariate subset `L*`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::Result;
use crate::learners::qr::{fit_parametric_qr_warm, QrSolution};
use crate::linalg::Design;
use crate::model::Dataset;

/// A fitted linear quantile model in the exposure and a covariate subset.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFit {
    /// `[intercept, β (if the exposure is in the model), α for each selected column]`.
    pub coefficients: Vec<f64>,
    /// Retained covariate columns (indices into `L`), ascending.
    pub selected: Vec<usize>,
    pub includes_exposure: bool,
    /// β̂_τ; zero when the exposure is excluded from the design.
    pub exposure_coef: f64,
    /// Attained weighted mean check loss.
    pub objective: f64,
    pub aic: f64,
    /// Interpolated rows at the solution vertex.
    pub basis: Vec<usize>,
}

impl QrFit {
    fn offset(&self) -> usize {
        1 + self.includes_exposure as usize
    }

    /// Covariate part `intercept + αᵀl*`.
    pub fn covariate_part(&self, l_row: &[f64]) -> f64 {
        let mut s = self.coefficients[0];
        for (k, &c) in self.selected.iter().enumerate() {
            s += self.coefficients[self.offset() + k] * l_row[c];
        }
        s
    }

    pub fn predict(&self, a: f64, l_row: &[f64]) -> f64 {
        self.exposure_coef * a + self.covariate_part(l_row)
    }
}

/// AIC of a quantile fit with `k` coefficients: `2k + 2n·log(mean check loss)`.
/// The loss is floored at a tiny multiple of the outcome scale so perfect
/// fits give a finite value.
pub fn qr_aic(objective: f64, k: usize, n: usize, loss_floor: f64) -> f64 {
    2.0 * k as f64 + 2.0 * n as f64 * objective.max(loss_floor).ln()
}

fn loss_floor(dataset: &Dataset) -> f64 {
    let scale = dataset.y().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    1e-12 * scale
}

/// Full design `[1, a, l₁, …, l_p]`.
fn full_design(dataset: &Dataset) -> Design {
    let l = dataset.l();
    Design::from_fn(dataset.n(), l.ncols() + 2, |i, j| match j {
        0 => 1.0,
        1 => dataset.a()[i],
        _ => l.get(i, j - 2),
    })
}

fn design_columns(includes_exposure: bool, selected: &[usize]) -> Vec<usize> {
    let mut cols = vec![0];
    if includes_exposure {
        cols.push(1);
    }
    cols.extend(selected.iter().map(|c| c + 2));
    cols
}

fn fit_columns(
    full: &Design,
    dataset: &Dataset,
    tau: f64,
    includes_exposure: bool,
    selected: &[usize],
    hint: &[usize],
) -> Result<QrFit> {
    let cols = design_columns(includes_exposure, selected);
    let x = full.select_cols(&cols);
    let sol: QrSolution = fit_parametric_qr_warm(&x, dataset.y(), tau, dataset.weights(), hint)?;
    let exposure_coef = if includes_exposure { sol.coefficients[1] } else { 0.0 };
    Ok(QrFit {
        aic: qr_aic(sol.objective, cols.len(), dataset.n(), loss_floor(dataset)),
        coefficients: sol.coefficients,
        selected: selected.to_vec(),
        includes_exposure,
        exposure_coef,
        objective: sol.objective,
        basis: sol.basis,
    })
}

/// Fits the model on a fixed covariate subset.
pub fn fit_exposure_qr(dataset: &Dataset, tau: f64, selected: &[usize], includes_exposure: bool) -> Result<QrFit> {
    fit_columns(&full_design(dataset), dataset, tau, includes_exposure, selected, &[])
}

/// Backward elimination from the main-effects model.
///
/// Each step drops the covariate whose removal gives the lowest AIC, as long
/// as that AIC is strictly below the current one. The intercept and the
/// exposure are never candidates. With `forced_exposure = false` the
/// exposure is left out of the design altogether.
pub fn stepwise_qr_aic(dataset: &Dataset, tau: f64, forced_exposure: bool) -> Result<QrFit> {
    let full = full_design(dataset);
    let mut current = fit_columns(&full, dataset, tau, forced_exposure, &(0..dataset.p()).collect::<Vec<_>>(), &[])?;
    while !current.selected.is_empty() {
        let cols = design_columns(forced_exposure, &current.selected);
        let block = DMatrix::from_fn(cols.len(), cols.len(), |r, c| full.get(current.basis[r], cols[c]));
        let inv = block.try_inverse();
        // Candidates are independent; they are fitted in parallel and
        // compared in index order, so the choice does not depend on timing.
        let candidates: Vec<Result<QrFit>> = (0..current.selected.len())
            .into_par_iter()
            .map(|drop| {
                let mut sel = current.selected.clone();
                sel.remove(drop);
                // Start from the vertex reached along the edge of the current
                // solution that zeroes the dropped coefficient in the shortest
                // step: release the basis row with the largest |∂b_c/∂y_row|.
                let hint: Vec<usize> = match &inv {
                    Some(inv) => {
                        let c = cols.len() - current.selected.len() + drop;
                        let release = (0..cols.len())
                            .max_by(|&i, &j| inv[(c, i)].abs().total_cmp(&inv[(c, j)].abs()).then(j.cmp(&i)))
                            .unwrap_or(0);
                        current.basis.iter().enumerate().filter(|&(k, _)| k != release).map(|(_, &r)| r).collect()
                    }
                    None => current.basis.clone(),
                };
                fit_columns(&full, dataset, tau, forced_exposure, &sel, &hint)
            })
            .collect();
        let mut best: Option<QrFit> = None;
        for cand in candidates {
            let cand = cand?;
            if best.as_ref().is_none_or(|b| cand.aic < b.aic) {
                best = Some(cand);
            }
        }
        match best {
            Some(b) if b.aic < current.aic => current = b,
            _ => break,
        }
    }
    Ok(current)
}

/// Residuals `y − Xb` of a fitted model on its own data.
pub fn qr_residuals(fit: &QrFit, dataset: &Dataset) -> Vec<f64> {
    (0..dataset.n()).map(|i| dataset.y()[i] - fit.predict(dataset.a()[i], dataset.l().row(i))).collect()
}

/// Design rows `[1, a, l*]` of the fitted model, for sandwich variances.
pub fn model_design(fit: &QrFit, dataset: &Dataset) -> Design {
    full_design(dataset).select_cols(&design_columns(fit.includes_exposure, &fit.selected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::qr::mean_check_loss;
    use crate::model::ExposureKind;
    use rand::Rng;

    #[test]
    fn no_covariates_returns_exposure_model() {
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = a.iter().map(|v| 2.0 * v + 1.0).collect();
        let d = Dataset::new(y, a, Design::zeros(10, 0), ExposureKind::Continuous, None).unwrap();
        let f = stepwise_qr_aic(&d, 0.5, true).unwrap();
        assert!(f.selected.is_empty());
        assert!((f.exposure_coef - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_exposure_drops_noise_column() {
        let mut rng = crate::rng::rng_from_seed(5);
        let n = 30;
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let noise = Design::from_fn(n, 1, |_, _| rng.random::<f64>());
        let y: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let d = Dataset::new(y, a, noise, ExposureKind::Continuous, None).unwrap();
        // Oracle: both subsets attain zero loss, so the smaller model has AIC
        // lower by exactly 2.
        let with = fit_exposure_qr(&d, 0.5, &[0], true).unwrap();
        let without = fit_exposure_qr(&d, 0.5, &[], true).unwrap();
        assert!(with.objective < 1e-12 && without.objective < 1e-12);
        assert!((with.aic - without.aic - 2.0).abs() < 1e-9);
        let f = stepwise_qr_aic(&d, 0.5, true).unwrap();
        assert!(f.selected.is_empty());
        assert!((f.exposure_coef - 2.0).abs() < 1e-10);
    }

    #[test]
    fn aic_is_monotone_in_loss() {
        assert!(qr_aic(0.5, 3, 100, 1e-12) < qr_aic(0.6, 3, 100, 1e-12));
        assert!(qr_aic(0.5, 3, 100, 1e-12) < qr_aic(0.5, 4, 100, 1e-12));
        let y = [1.0, 2.0];
        assert!(mean_check_loss(&y, 0.5, &[1.0, 1.0]) > 0.0);
    }
}

//! Density of the quantile residuals `Y − Q̂_τ(Y|A,L)` at zero, assuming
//! the residual law does not depend on `(A, L)`.

use serde::{Deserialize, Serialize};

use crate::error::{AlqrError, Result};
use crate::stats::{effective_n, normal_pdf, weighted_iqr, weighted_sd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub value_at_zero: f64,
    pub bandwidth: f64,
    pub floor: f64,
    pub floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityOptions {
    /// Overrides the Silverman bandwidth.
    pub bandwidth: Option<f64>,
    /// Floor is `floor_factor / IQR(y)`.
    pub floor_factor: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions { bandwidth: None, floor_factor: 1e-3 }
    }
}

/// Silverman's rule `0.9·min(sd, IQR/1.34)·n^(−1/5)`, with the Kish effective
/// sample size standing in for n. Falls back to the sd when the IQR is zero.
pub fn silverman_bandwidth(x: &[f64], w: &[f64]) -> f64 {
    let sd = weighted_sd(x, w);
    let iqr = weighted_iqr(x, w) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    0.9 * spread * effective_n(w).powf(-0.2)
}

/// Floor `factor / IQR(y)`; uses the sd, then 1, if the outcome IQR is zero.
pub fn density_floor(y: &[f64], w: &[f64], factor: f64) -> f64 {
    let iqr = weighted_iqr(y, w);
    let scale = if iqr > 0.0 {
        iqr
    } else {
        let sd = weighted_sd(y, w);
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    };
    factor / scale
}

/// Gaussian-kernel weighted KDE of `residuals` at 0, floored at `floor`.
pub fn residual_density_at_quantile(
    residuals: &[f64],
    weights: &[f64],
    floor: f64,
    bandwidth: Option<f64>,
) -> Result<DensityEstimate> {
    if residuals.len() != weights.len() {
        return Err(AlqrError::LengthMismatch("residuals and weights disagree".into()));
    }
    if residuals.is_empty() {
        return Err(AlqrError::TooFewRows { n: 0, required: 1 });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(_) => return Err(AlqrError::InvalidConfig("bandwidth must be positive".into())),
        None => {
            if residuals.len() < 2 {
                return Err(AlqrError::TooFewRows { n: residuals.len(), required: 2 });
            }
            let h = silverman_bandwidth(residuals, weights);
            if !(h > 0.0) {
                return Err(AlqrError::DegenerateResiduals);
            }
            h
        }
    };
    let (mut s, mut sw) = (0.0, 0.0);
    for (r, w) in residuals.iter().zip(weights) {
        s += w * normal_pdf(r / h);
        sw += w;
    }
    let raw = s / (sw * h);
    let floored = !(raw >= floor);
    Ok(DensityEstimate { value_at_zero: if floored { floor } else { raw }, bandwidth: h, floor, floored })
}

/// Density at 0 from the residuals of a linear quantile fit, leaving out the
/// rows the fit interpolates. Those residuals are zero by construction and
/// would put a spike of mass k/n at the evaluation point. The rest are
/// in-sample residuals of a k-parameter fit, so they are rescaled by
/// √(n/(n−k)) as for a least-squares residual scale. Falls back to all rows,
/// unscaled, when fewer than two remain.
pub fn parametric_residual_density(
    residuals: &[f64],
    weights: &[f64],
    interpolated: &[usize],
    floor: f64,
) -> Result<DensityEstimate> {
    let mut keep = vec![true; residuals.len()];
    for &i in interpolated {
        if let Some(k) = keep.get_mut(i) {
            *k = false;
        }
    }
    if keep.iter().filter(|&&k| k).count() < 2 {
        return residual_density_at_quantile(residuals, weights, floor, None);
    }
    let dropped = keep.iter().filter(|&&k| !k).count();
    let scale = (residuals.len() as f64 / (residuals.len() - dropped) as f64).sqrt();
    let (r, w): (Vec<f64>, Vec<f64>) =
        residuals.iter().zip(weights).zip(&keep).filter(|(_, &k)| k).map(|((&r, &w), _)| (r * scale, w)).unzip();
    residual_density_at_quantile(&r, &w, floor, None)
}

/// Convenience wrapper computing the floor from the outcome vector.
pub fn residual_density_with_outcome(
    residuals: &[f64],
    weights: &[f64],
    y: &[f64],
    y_weights: &[f64],
    opts: &DensityOptions,
) -> Result<DensityEstimate> {
    residual_density_at_quantile(residuals, weights, density_floor(y, y_weights, opts.floor_factor), opts.bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_rows_are_left_out() {
        let r = [0.0, -1.0, 0.0, 1.0, 2.0];
        let w = [1.0; 5];
        let all = residual_density_at_quantile(&r, &w, 1e-9, None).unwrap();
        let without = parametric_residual_density(&r, &w, &[0, 2], 1e-9).unwrap();
        let c = (5.0f64 / 3.0).sqrt();
        let direct = residual_density_at_quantile(&[-c, c, 2.0 * c], &[1.0; 3], 1e-9, None).unwrap();
        assert_eq!(without, direct);
        assert!(without.value_at_zero < all.value_at_zero);
        // nothing left to estimate from: use every row
        assert_eq!(parametric_residual_density(&r[..2], &w[..2], &[0], 1e-9).unwrap().value_at_zero, {
            residual_density_at_quantile(&r[..2], &w[..2], 1e-9, None).unwrap().value_at_zero
        });
    }

    #[test]
    fn kernel_center() {
        let d = residual_density_at_quantile(&[0.0], &[1.0], 1e-6, Some(1.0)).unwrap();
        assert!((d.value_at_zero - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(!d.floored);
    }

    #[test]
    fn two_point_sum() {
        let d = residual_density_at_quantile(&[-1.0, 1.0], &[1.0, 1.0], 1e-6, Some(1.0)).unwrap();
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d.value_at_zero - phi1).abs() < 1e-15);
    }

    #[test]
    fn floor_engages() {
        let r: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let d = residual_density_at_quantile(&r, &[1.0; 20], 0.01, Some(0.5)).unwrap();
        assert!(d.floored);
        assert_eq!(d.value_at_zero, 0.01);
    }

    #[test]
    fn identical_residuals_are_degenerate() {
        assert!(matches!(
            residual_density_at_quantile(&[2.0; 5], &[1.0; 5], 1e-3, None),
            Err(AlqrError::DegenerateResiduals)
        ));
    }
}

//! Small weighted-statistics helpers. Sums are accumulated in index order so
//! results are bit-reproducible.

pub fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), w.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        num += wi * xi;
        den += wi;
    }
    num / den
}

/// Weighted variance with Hájek normalization, `Σw(x−x̄)² / Σw`.
pub fn weighted_variance(x: &[f64], w: &[f64]) -> f64 {
    let mu = weighted_mean(x, w);
    let mut num = 0.0;
    let mut den = 0.0;
    for (xi, wi) in x.iter().zip(w) {
        num += wi * (xi - mu) * (xi - mu);
        den += wi;
    }
    num / den
}

/// Kish effective sample size `(Σw)² / Σw²`; equals n for equal weights.
pub fn effective_n(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Weighted sample standard deviation; with equal weights this is the usual
/// n−1 estimator.
pub fn weighted_sd(x: &[f64], w: &[f64]) -> f64 {
    let ne = effective_n(w);
    if ne <= 1.0 {
        return 0.0;
    }
    (weighted_variance(x, w) * ne / (ne - 1.0)).sqrt()
}

/// Lower (type-1) weighted quantile: the smallest x whose cumulative weight
/// reaches `p` of the total.
pub fn weighted_quantile(x: &[f64], w: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let total: f64 = w.iter().sum();
    let target = p * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += w[i];
        if acc >= target - 1e-12 * total {
            return x[i];
        }
    }
    x[*idx.last().expect("weighted_quantile on empty input")]
}

/// Weighted interquartile range using the type-1 convention.
pub fn weighted_iqr(x: &[f64], w: &[f64]) -> f64 {
    weighted_quantile(x, w, 0.75) - weighted_quantile(x, w, 0.25)
}

pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

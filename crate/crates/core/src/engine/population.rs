use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from_seed, Rng};

/// Known data-generating law, as needed to evaluate Ψ_τ with true nuisances.
pub trait TruthModel: Sync {
    fn draw_covariates(&self, rng: &mut Rng) -> Vec<f64>;
    /// `E(A|L = l)`.
    fn exposure_mean(&self, l: &[f64]) -> f64;
    fn draw_exposure(&self, l: &[f64], rng: &mut Rng) -> f64;
    /// `Q_τ(Y|A = a, L = l)`.
    fn conditional_quantile(&self, a: f64, l: &[f64], tau: f64) -> f64;
    /// `E{Q_τ(Y|A,L) | L = l}`.
    fn mean_quantile_given_covariates(&self, l: &[f64], tau: f64) -> f64;
}

/// Monte Carlo values of the two equivalent forms of the estimand:
///
/// * form 2: `E[(A−A*){Q(A,L) − Q(A*,L)}] / E[(A−A*)²]` with `A*` an
///   independent draw from `A|L`;
/// * form 3: `E[(A−m){Q(A,L) − E(Q|L)}] / E[(A−m)²]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationValue {
    pub form2: f64,
    pub se2: f64,
    pub form3: f64,
    pub se3: f64,
    pub abs_difference: f64,
    /// Standard error of `form2 − form3` (both use the same draws).
    pub combined_se: f64,
}

struct RatioAcc {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl RatioAcc {
    fn ratio(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    /// Influence values of the ratio of means, `(Nᵢ − R·Dᵢ) / mean(D)`.
    fn influence(&self) -> Vec<f64> {
        let r = self.ratio();
        let md = self.den.iter().sum::<f64>() / self.den.len() as f64;
        self.num.iter().zip(&self.den).map(|(n, d)| (n - r * d) / md).collect()
    }
}

fn se_of_mean(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    let mu = phi.iter().sum::<f64>() / n;
    let var = phi.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

pub fn estimand_population_value(truth: &dyn TruthModel, tau: f64, draws: usize, seed: u64) -> PopulationValue {
    let mut rng = rng_from_seed(seed);
    let mut f2 = RatioAcc { num: Vec::with_capacity(draws), den: Vec::with_capacity(draws) };
    let mut f3 = RatioAcc { num: Vec::with_capacity(draws), den: Vec::with_capacity(draws) };
    for _ in 0..draws {
        let l = truth.draw_covariates(&mut rng);
        let a = truth.draw_exposure(&l, &mut rng);
        let a_star = truth.draw_exposure(&l, &mut rng);
        let m = truth.exposure_mean(&l);
        let q = truth.conditional_quantile(a, &l, tau);
        let q_star = truth.conditional_quantile(a_star, &l, tau);
        let v = truth.mean_quantile_given_covariates(&l, tau);
        f2.num.push((a - a_star) * (q - q_star));
        f2.den.push((a - a_star) * (a - a_star));
        f3.num.push((a - m) * (q - v));
        f3.den.push((a - m) * (a - m));
    }
    let (phi2, phi3) = (f2.influence(), f3.influence());
    let diff: Vec<f64> = phi2.iter().zip(&phi3).map(|(x, y)| x - y).collect();
    let (form2, form3) = (f2.ratio(), f3.ratio());
    PopulationValue {
        form2,
        se2: se_of_mean(&phi2),
        form3,
        se3: se_of_mean(&phi3),
        abs_difference: (form2 - form3).abs(),
        combined_se: se_of_mean(&diff),
    }
}

/// Uniform helper for truth models.
#[allow(dead_code)]
pub(crate) fn bernoulli(rng: &mut Rng, p: f64) -> f64 {
    (rng.random::<f64>() < p) as u8 as f64
}

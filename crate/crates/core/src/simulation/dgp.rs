//! Data-generating processes of the four simulation experiments.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::engine::TruthModel;
use crate::error::{AlqrError, Result};
use crate::linalg::Design;
use crate::model::{Dataset, ExposureKind};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    /// Binary exposure, homoscedastic exponential errors.
    #[serde(rename = "exp1a")]
    Exp1Homoscedastic,
    /// Binary exposure, error scale depends on the exposure.
    #[serde(rename = "exp1b")]
    Exp1Heteroscedastic,
    /// Continuous normal exposure.
    #[serde(rename = "exp1c")]
    Exp1Continuous,
    /// Propensity with quadratic and interaction terms (extreme scores).
    #[serde(rename = "exp2")]
    Exp2ExtremeProp,
    /// Randomized exposure.
    #[serde(rename = "exp3")]
    Exp3Randomized,
    /// 50 AR(0.5) covariates, sparse outcome model.
    #[serde(rename = "exp4")]
    Exp4HighDim,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::Exp1Homoscedastic,
        ExperimentId::Exp1Heteroscedastic,
        ExperimentId::Exp1Continuous,
        ExperimentId::Exp2ExtremeProp,
        ExperimentId::Exp3Randomized,
        ExperimentId::Exp4HighDim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Exp1Homoscedastic => "exp1a",
            ExperimentId::Exp1Heteroscedastic => "exp1b",
            ExperimentId::Exp1Continuous => "exp1c",
            ExperimentId::Exp2ExtremeProp => "exp2",
            ExperimentId::Exp3Randomized => "exp3",
            ExperimentId::Exp4HighDim => "exp4",
        }
    }

    pub fn exposure_kind(self) -> ExposureKind {
        match self {
            ExperimentId::Exp1Continuous | ExperimentId::Exp4HighDim => ExposureKind::Continuous,
            _ => ExposureKind::Binary,
        }
    }

    pub fn num_covariates(self) -> usize {
        if self == ExperimentId::Exp4HighDim {
            EXP4_DIM
        } else {
            4
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = AlqrError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.name() == s.to_ascii_lowercase())
            .ok_or_else(|| AlqrError::InvalidConfig(format!("unknown experiment `{s}`")))
    }
}

const EXP4_DIM: usize = 50;
const EXP4_RHO: f64 = 0.5;

/// Covariance of the four Experiment 1–3 covariates.
pub const EXP1_COVARIANCE: [[f64; 4]; 4] =
    [[1.0, 0.5, 0.2, 0.3], [0.5, 1.0, 0.7, 0.0], [0.2, 0.7, 1.0, 0.0], [0.3, 0.0, 0.0, 1.0]];

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A fully specified simulation design with sample size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpSpec {
    pub id: ExperimentId,
    pub n: usize,
    chol: DMatrix<f64>,
}

/// A simulated sample together with the true `E(A|L)` of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub dataset: Dataset,
    pub true_exposure_mean: Vec<f64>,
}

impl DgpSpec {
    pub fn new(id: ExperimentId, n: usize) -> Self {
        let chol = DMatrix::from_fn(4, 4, |i, j| EXP1_COVARIANCE[i][j])
            .cholesky()
            .expect("covariance is positive definite")
            .l();
        DgpSpec { id, n, chol }
    }

    /// `E[Y|A,L] − A`-free part shared by Experiments 1–3:
    /// `sin L1 + L2² + L3 + L4 + L3·L4`.
    fn nuisance_signal(l: &[f64]) -> f64 {
        l[0].sin() + l[1] * l[1] + l[2] + l[3] + l[2] * l[3]
    }

    fn exp4_signal(l: &[f64]) -> f64 {
        (1..=5).map(|k| l[k - 1] / k as f64).sum::<f64>() + (11..=15).map(|k| l[k - 1] / (k - 10) as f64).sum::<f64>()
    }

    /// Scale of the exponential error given the exposure.
    fn error_scale(&self, a: f64) -> f64 {
        match self.id {
            ExperimentId::Exp1Homoscedastic | ExperimentId::Exp3Randomized => 2.0,
            ExperimentId::Exp1Heteroscedastic => 2.0 + a,
            ExperimentId::Exp1Continuous => 4.0,
            ExperimentId::Exp2ExtremeProp => 3.0,
            ExperimentId::Exp4HighDim => 2.0,
        }
    }

    /// True propensity score `pr(A = 1|L)` (binary designs only).
    pub fn propensity(&self, l: &[f64]) -> Result<f64> {
        match self.id {
            ExperimentId::Exp1Homoscedastic | ExperimentId::Exp1Heteroscedastic => {
                Ok(expit(-0.5 + 0.2 * l[0] - 0.4 * l[1] - 0.4 * l[2] + 0.2 * l[3]))
            }
            ExperimentId::Exp2ExtremeProp => Ok(expit(
                -0.5 + 0.2 * l[0] - 0.4 * l[1] - 0.4 * l[2] + 0.2 * l[3] + 0.5 * l[0] * l[0] - 0.5 * l[1] * l[1]
                    + 0.5 * l[2] * l[3],
            )),
            ExperimentId::Exp3Randomized => Ok(0.5),
            ExperimentId::Exp1Continuous | ExperimentId::Exp4HighDim => Err(AlqrError::NotBinary),
        }
    }

    fn draw_outcome(&self, a: f64, l: &[f64], rng: &mut Rng) -> f64 {
        match self.id {
            ExperimentId::Exp4HighDim => {
                let z: f64 = StandardNormal.sample(rng);
                a + Self::exp4_signal(l) + 2.0 * z
            }
            _ => {
                let e: f64 = Exp1.sample(rng);
                1.0 + a + Self::nuisance_signal(l) + self.error_scale(a) * e
            }
        }
    }

    /// Simulates `n` rows; deterministic in `seed`.
    pub fn generate(&self, seed: u64) -> GeneratedData {
        let mut rng = rng_from_seed(seed);
        let p = self.id.num_covariates();
        let mut l = Design::zeros(self.n, p);
        let mut a = Vec::with_capacity(self.n);
        let mut y = Vec::with_capacity(self.n);
        let mut m = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let li = self.draw_covariates(&mut rng);
            let ai = self.draw_exposure(&li, &mut rng);
            y.push(self.draw_outcome(ai, &li, &mut rng));
            m.push(self.exposure_mean(&li));
            a.push(ai);
            for (j, v) in li.into_iter().enumerate() {
                l.set(i, j, v);
            }
        }
        let dataset = Dataset::new(y, a, l, self.id.exposure_kind(), None).expect("simulated data are valid");
        GeneratedData { dataset, true_exposure_mean: m }
    }

    /// Columns of the correctly specified quantile model, with the exposure
    /// always in column 1.
    pub fn oracle_design(&self, dataset: &Dataset) -> Design {
        let (a, l) = (dataset.a(), dataset.l());
        match self.id {
            ExperimentId::Exp4HighDim => {
                let cols: Vec<usize> = (0..5).chain(10..15).collect();
                Design::from_fn(dataset.n(), 2 + cols.len(), |i, j| match j {
                    0 => 1.0,
                    1 => a[i],
                    _ => l.get(i, cols[j - 2]),
                })
            }
            _ => Design::from_fn(dataset.n(), 7, |i, j| {
                let r = l.row(i);
                match j {
                    0 => 1.0,
                    1 => a[i],
                    2 => r[0].sin(),
                    3 => r[1] * r[1],
                    4 => r[2],
                    5 => r[3],
                    _ => r[2] * r[3],
                }
            }),
        }
    }
}

/// `Q_τ` of the standard exponential distribution.
fn exp_quantile(tau: f64) -> f64 {
    -(1.0 - tau).ln()
}

fn std_normal_quantile(tau: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(tau)
}

impl TruthModel for DgpSpec {
    fn draw_covariates(&self, rng: &mut Rng) -> Vec<f64> {
        match self.id {
            ExperimentId::Exp4HighDim => {
                let mut l = Vec::with_capacity(EXP4_DIM);
                let mut prev: f64 = StandardNormal.sample(rng);
                l.push(prev);
                let innov = (1.0 - EXP4_RHO * EXP4_RHO).sqrt();
                for _ in 1..EXP4_DIM {
                    let e: f64 = StandardNormal.sample(rng);
                    prev = EXP4_RHO * prev + innov * e;
                    l.push(prev);
                }
                l
            }
            _ => {
                let z = DVector::from_fn(4, |_, _| StandardNormal.sample(rng));
                (&self.chol * z).iter().copied().collect()
            }
        }
    }

    fn exposure_mean(&self, l: &[f64]) -> f64 {
        match self.id {
            ExperimentId::Exp1Continuous => -0.5 + l[0] - 2.0 * l[1] - 2.0 * l[2] + l[3],
            ExperimentId::Exp4HighDim => (1..=10).map(|k| l[k - 1] / k as f64).sum(),
            _ => self.propensity(l).expect("binary design"),
        }
    }

    fn draw_exposure(&self, l: &[f64], rng: &mut Rng) -> f64 {
        let mu = self.exposure_mean(l);
        match self.id {
            ExperimentId::Exp1Continuous => {
                let z: f64 = StandardNormal.sample(rng);
                mu + 2.0 * z
            }
            ExperimentId::Exp4HighDim => {
                let z: f64 = StandardNormal.sample(rng);
                mu + z
            }
            _ => (rng.random::<f64>() < mu) as u8 as f64,
        }
    }

    fn conditional_quantile(&self, a: f64, l: &[f64], tau: f64) -> f64 {
        match self.id {
            ExperimentId::Exp4HighDim => a + Self::exp4_signal(l) + 2.0 * std_normal_quantile(tau),
            _ => 1.0 + a + Self::nuisance_signal(l) + self.error_scale(a) * exp_quantile(tau),
        }
    }

    fn mean_quantile_given_covariates(&self, l: &[f64], tau: f64) -> f64 {
        // Q is affine in a for every design, so E{Q(A,L)|L} = Q(E(A|L), L).
        self.conditional_quantile(self.exposure_mean(l), l, tau)
    }
}

/// Closed-form estimand value for a design.
///
/// Every design except the heteroscedastic one is a pure location shift in
/// the exposure (Ψ_τ = 1); with errors `(2 + A)·Exp(1)` the exposure
/// coefficient of the conditional quantile is `1 − log(1 − τ)`.
pub fn true_psi(id: ExperimentId, tau: f64) -> f64 {
    match id {
        ExperimentId::Exp1Heteroscedastic => 1.0 + exp_quantile(tau),
        _ => 1.0,
    }
}

/// Simulates one sample of the design.
pub fn gen_experiment(spec: &DgpSpec, seed: u64) -> GeneratedData {
    spec.generate(seed)
}

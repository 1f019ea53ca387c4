//! Assumption-lean inference for the exposure coefficient of a partially
//! linear quantile model.
//!
//! The estimand is the model-free summary
//!
//! ```text
//! Ψ_τ = E[(A − E(A|L)) · (Q_τ(Y|A,L) − E{Q_τ(Y|A,L)|L})] / E[(A − E(A|L))²]
//! ```
//!
//! which equals β_τ whenever `Q_τ(Y|A,L) = β_τ A + ω_τ(L)` holds, and remains a
//! well-defined weighted summary otherwise. The crate provides nuisance
//! learners, plug-in / debiased / targeted estimators with cross-fitting, and a
//! Monte Carlo harness for the standard simulation designs.
//!
//! ```
//! use alqr_core::{estimate, Dataset, EstimatorConfig, EstimatorKind, ExposureKind};
//! use nalgebra::DMatrix;
//!
//! let n = 60;
//! let l = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin());
//! let a: Vec<f64> = (0..n).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
//! let y: Vec<f64> = (0..n).map(|i| a[i] + l[(i, 0)] + ((i * 13) % 7) as f64 * 0.1).collect();
//! let data = Dataset::new(y, a, l, ExposureKind::Binary, None).unwrap();
//!
//! let mut config = EstimatorConfig::new(0.5, EstimatorKind::Dml);
//! config.folds = 2;
//! config.learners.num_trees = 20;
//! config.learners.mean_trees = 10;
//! let out = estimate(&data, &config).unwrap();
//! assert!(out.ci_low <= out.psi_hat && out.psi_hat <= out.ci_high);
//! ```

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod engine;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod simulation;
pub mod stats;
pub mod targeting;

mod estimate;

pub use engine::{Link, NuisanceFits};
pub use error::{AlqrError, Result};
pub use estimate::{estimate, estimate_from_nuisances, estimate_many, Estimate};
pub use model::{
    make_folds, validate_dataset, Dataset, Diagnostics, EstimatorConfig, EstimatorKind, EstimatorOutput, ExposureKind,
    FoldPlan, LearnerSettings, MeanCandidates, TmleMode, Z_975,
};

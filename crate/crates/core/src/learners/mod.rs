//! Nuisance learners.

pub mod density;
pub mod forest;
pub mod mean;
pub mod qr;
pub mod stepwise;

pub use density::{residual_density_at_quantile, DensityEstimate, DensityOptions};
pub use forest::{fit_quantile_forest, qf_predict, ForestParams, QuantileForest, RegressionForest};
pub use mean::{fit_mean_learner, mean_predict, MeanFamily, MeanKind, MeanLearnerOptions, MeanModel};
pub use qr::{check_loss, fit_parametric_qr, QrSolution};
pub use stepwise::{stepwise_qr_aic, QrFit};

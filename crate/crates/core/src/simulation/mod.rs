//! Simulation designs, reference estimators and the Monte Carlo harness.

pub mod dgp;
pub mod monte_carlo;
pub mod reference;

pub use dgp::{gen_experiment, true_psi, DgpSpec, ExperimentId, GeneratedData};
pub use monte_carlo::{
    propensity_diagnostics, run_monte_carlo, summarize_records, HistogramBin, McOptions, McRecord, McRow, McSummary,
    PropensityHistogram, SimEstimator,
};
pub use reference::{design_qr_output, naive_qr_estimate, oracle_estimate, qr_vs_estimate};

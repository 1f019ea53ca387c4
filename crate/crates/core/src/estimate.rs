use crate::engine::{
    dml_estimate_with_influence, estimate_nuisances_multi, plugin_estimate_with_influence, Link, NuisanceFits,
    NuisanceRequest, QuantileLearner,
};
use crate::error::{AlqrError, Result};
use crate::learners::stepwise::{fit_exposure_qr, model_design, stepwise_qr_aic, QrFit};
use crate::model::{make_folds, validate_tau, Dataset, EstimatorConfig, EstimatorKind, EstimatorOutput, ExposureKind};
use crate::simulation::reference::design_qr_output;
use crate::targeting::{one_step_with_influence, tmle_binary_with_influence};

/// An estimate together with the per-observation influence values behind its
/// standard error (empty for the parametric reference methods, whose SE is a
/// model-based sandwich).
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub output: EstimatorOutput,
    pub influence: Vec<f64>,
}

/// Runs the configured estimator at `config.tau`.
pub fn estimate(dataset: &Dataset, config: &EstimatorConfig) -> Result<EstimatorOutput> {
    estimate_many(dataset, &[config.tau], config)?.remove(0).map(|e| e.output)
}

pub(crate) fn needs_h(kind: EstimatorKind, exposure: ExposureKind) -> bool {
    kind == EstimatorKind::TmleVs || (kind == EstimatorKind::Tmle && exposure == ExposureKind::Continuous)
}

/// Runs the configured estimator at several quantile levels, sharing the fold
/// plan and every τ-independent learner. Setup failures (configuration, fold
/// plan, nuisance learners) are returned as the outer error; estimator
/// failures at a single level are reported per level.
pub fn estimate_many(dataset: &Dataset, taus: &[f64], config: &EstimatorConfig) -> Result<Vec<Result<Estimate>>> {
    config.validate()?;
    if taus.is_empty() {
        return Err(AlqrError::InvalidConfig("no quantile levels requested".into()));
    }
    for &t in taus {
        validate_tau(t)?;
    }
    let kind = config.estimator;
    if config.link == Link::Log {
        let unsupported = match kind {
            EstimatorKind::DmlVs | EstimatorKind::TmleVs | EstimatorKind::Qr | EstimatorKind::QrVs => true,
            EstimatorKind::Tmle => dataset.exposure_kind() == ExposureKind::Continuous,
            _ => false,
        };
        if unsupported {
            return Err(AlqrError::UnsupportedLink(format!("estimator `{kind}`")));
        }
    }
    if matches!(kind, EstimatorKind::Qr | EstimatorKind::QrVs) {
        return Ok(taus
            .iter()
            .map(|&t| parametric_reference(dataset, t, kind == EstimatorKind::QrVs, config))
            .collect());
    }
    let plan = make_folds(dataset, config.folds, config.seed)?;
    let req = NuisanceRequest {
        taus,
        learner: if kind.uses_selection() { QuantileLearner::Stepwise } else { QuantileLearner::Forest },
        link: config.link,
        need_h: needs_h(kind, dataset.exposure_kind()),
        seed: config.seed,
    };
    let nuisances = estimate_nuisances_multi(dataset, &plan, &config.learners, &req)?;
    Ok(nuisances.iter().map(|n| estimate_from_nuisances(dataset, n, kind, config)).collect())
}

/// Applies an estimator to precomputed nuisances.
pub fn estimate_from_nuisances(
    dataset: &Dataset,
    n: &NuisanceFits,
    kind: EstimatorKind,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    let tau = n.tau;
    let (output, influence) = match kind {
        EstimatorKind::PlugIn => plugin_estimate_with_influence(n, dataset, config.link)?,
        EstimatorKind::Dml | EstimatorKind::DmlVs => {
            let (mut o, phi) = dml_estimate_with_influence(n, dataset, tau, config.link)?;
            o.estimator = kind;
            (o, phi)
        }
        EstimatorKind::Tmle => match dataset.exposure_kind() {
            ExposureKind::Binary => {
                let (o, phi, _) =
                    tmle_binary_with_influence(dataset, n, tau, config.link, &config.learners, config.tmle_mode)?;
                (o, phi)
            }
            ExposureKind::Continuous => {
                one_step_with_influence(dataset, n, tau, config.link, &config.learners, EstimatorKind::Tmle)?
            }
        },
        EstimatorKind::TmleVs => {
            one_step_with_influence(dataset, n, tau, config.link, &config.learners, EstimatorKind::TmleVs)?
        }
        EstimatorKind::Qr | EstimatorKind::QrVs | EstimatorKind::Oracle => {
            return Err(AlqrError::InvalidConfig(format!("`{kind}` does not use nuisance fits")));
        }
    };
    Ok(Estimate { output, influence })
}

/// Exposure coefficient of a fitted linear quantile model with its sandwich SE.
pub(crate) fn qr_output(
    fit: &QrFit,
    dataset: &Dataset,
    tau: f64,
    kind: EstimatorKind,
    floor_factor: f64,
) -> Result<EstimatorOutput> {
    design_qr_output(&model_design(fit, dataset), dataset, tau, kind, floor_factor)
}

fn parametric_reference(dataset: &Dataset, tau: f64, select: bool, config: &EstimatorConfig) -> Result<Estimate> {
    let fit = if select {
        stepwise_qr_aic(dataset, tau, true)?
    } else {
        fit_exposure_qr(dataset, tau, &(0..dataset.p()).collect::<Vec<_>>(), true)?
    };
    let kind = if select { EstimatorKind::QrVs } else { EstimatorKind::Qr };
    let output = qr_output(&fit, dataset, tau, kind, config.learners.density_floor_factor)?;
    Ok(Estimate { output, influence: Vec::new() })
}

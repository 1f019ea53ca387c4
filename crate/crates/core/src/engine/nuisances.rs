use crate::engine::estimators::denominator;
use crate::engine::Link;
use crate::error::{AlqrError, Result};
use crate::learners::density::{density_floor, parametric_residual_density};
use crate::learners::forest::{fit_quantile_forest, ForestParams};
use crate::learners::mean::{fit_mean_learner, MeanFamily, MeanLearnerOptions, MeanModel};
use crate::learners::stepwise::stepwise_qr_aic;
use crate::model::{Dataset, EstimatorConfig, EstimatorKind, ExposureKind, FoldPlan, LearnerSettings};
use crate::rng::{derive_seed, STREAM_EXPOSURE_MEAN, STREAM_H, STREAM_LOG_V, STREAM_QUANTILE, STREAM_V};

/// Per-observation nuisance values, each computed by learners that did not
/// see the observation's fold.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceFits {
    pub tau: f64,
    /// `Ê(A|L)`.
    pub m: Vec<f64>,
    /// `Q̂_τ(Y|A,L)` at the observed exposure.
    pub q: Vec<f64>,
    /// `Ê{Q̂_τ|L}`.
    pub v: Vec<f64>,
    /// Residual density at the quantile, floored.
    pub d: Vec<f64>,
    pub q1: Option<Vec<f64>>,
    pub q0: Option<Vec<f64>>,
    /// `Ê{log Q̂_τ|L}` (log link only).
    pub v_log: Option<Vec<f64>>,
    /// `Ê[w|L]` with `w = (A − m)/d` (continuous one-step targeting).
    pub h: Option<Vec<f64>>,
    /// Per-row exposure coefficient of the parametric quantile model that
    /// produced `q` (selection learner only).
    pub beta: Option<Vec<f64>>,
    pub fold_of: Vec<usize>,
    pub fold_seed: u64,
    pub folds: usize,
    pub stratified: bool,
    pub density_floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantileLearner {
    /// Quantile regression forest on `(A, L)`.
    Forest,
    /// Main-effects linear quantile model after backward AIC selection.
    Stepwise,
}

/// What to compute for a batch of quantile levels sharing one fold plan.
#[derive(Debug, Clone)]
pub struct NuisanceRequest<'a> {
    pub taus: &'a [f64],
    pub learner: QuantileLearner,
    pub link: Link,
    pub need_h: bool,
    pub seed: u64,
}

pub(crate) fn mean_options(s: &LearnerSettings) -> MeanLearnerOptions {
    MeanLearnerOptions {
        candidates: s.mean_candidates,
        forest: ForestParams { num_trees: s.mean_trees, min_leaf: s.min_leaf, mtry: s.mtry, subsample: s.subsample },
    }
}

pub(crate) fn quantile_forest_params(s: &LearnerSettings) -> ForestParams {
    ForestParams { num_trees: s.num_trees, min_leaf: s.min_leaf, mtry: s.mtry, subsample: s.subsample }
}

/// Nuisances for a single configuration.
pub fn estimate_nuisances(
    dataset: &Dataset,
    tau: f64,
    config: &EstimatorConfig,
    plan: &FoldPlan,
) -> Result<NuisanceFits> {
    let learner = if config.estimator.uses_selection() { QuantileLearner::Stepwise } else { QuantileLearner::Forest };
    let need_h = matches!(config.estimator, EstimatorKind::TmleVs)
        || (config.estimator == EstimatorKind::Tmle && dataset.exposure_kind() == ExposureKind::Continuous);
    let req = NuisanceRequest { taus: &[tau], learner, link: config.link, need_h, seed: config.seed };
    Ok(estimate_nuisances_multi(dataset, plan, &config.learners, &req)?.remove(0))
}

struct Buffers {
    m: Vec<f64>,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
    q1: Vec<Vec<f64>>,
    q0: Vec<Vec<f64>>,
    v_log: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    floored: Vec<bool>,
}

/// Cross-fitted nuisances for several quantile levels; exposure-mean and
/// forest fits are shared across levels.
pub fn estimate_nuisances_multi(
    dataset: &Dataset,
    plan: &FoldPlan,
    settings: &LearnerSettings,
    req: &NuisanceRequest<'_>,
) -> Result<Vec<NuisanceFits>> {
    let n = dataset.n();
    let t = req.taus.len();
    if plan.assignments.len() != n {
        return Err(AlqrError::LengthMismatch("fold plan does not match dataset".into()));
    }
    let binary = dataset.exposure_kind() == ExposureKind::Binary;
    let mut buf = Buffers {
        m: vec![0.0; n],
        q: vec![vec![0.0; n]; t],
        v: vec![vec![0.0; n]; t],
        d: vec![vec![0.0; n]; t],
        q1: vec![vec![0.0; n]; t],
        q0: vec![vec![0.0; n]; t],
        v_log: vec![vec![0.0; n]; t],
        h: vec![vec![0.0; n]; t],
        beta: vec![vec![0.0; n]; t],
        floored: vec![false; t],
    };
    let mopts = mean_options(settings);
    for f in 0..plan.k {
        let train = plan.train_rows(f);
        let eval = plan.eval_rows(f);
        if eval.is_empty() {
            continue;
        }
        fit_fold(dataset, &train, &eval, f as u64, settings, &mopts, req, binary, &mut buf)?;
    }
    denominator(dataset.a(), &buf.m, dataset.weights())?;

    let mut out = Vec::with_capacity(t);
    for k in 0..t {
        out.push(NuisanceFits {
            tau: req.taus[k],
            m: buf.m.clone(),
            q: std::mem::take(&mut buf.q[k]),
            v: std::mem::take(&mut buf.v[k]),
            d: std::mem::take(&mut buf.d[k]),
            q1: binary.then(|| std::mem::take(&mut buf.q1[k])),
            q0: binary.then(|| std::mem::take(&mut buf.q0[k])),
            v_log: (req.link == Link::Log).then(|| std::mem::take(&mut buf.v_log[k])),
            h: req.need_h.then(|| std::mem::take(&mut buf.h[k])),
            beta: (req.learner == QuantileLearner::Stepwise).then(|| std::mem::take(&mut buf.beta[k])),
            fold_of: plan.assignments.clone(),
            fold_seed: plan.seed,
            folds: plan.k,
            stratified: plan.stratified,
            density_floored: buf.floored[k],
        });
    }
    Ok(out)
}

fn check_positive(values: &[f64], rows: &[usize]) -> Result<()> {
    for (k, &v) in values.iter().enumerate() {
        if !(v > 0.0) {
            return Err(AlqrError::NonPositiveQuantile { row: rows[k], value: v });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit_fold(
    dataset: &Dataset,
    train: &[usize],
    eval: &[usize],
    fold: u64,
    settings: &LearnerSettings,
    mopts: &MeanLearnerOptions,
    req: &NuisanceRequest<'_>,
    binary: bool,
    buf: &mut Buffers,
) -> Result<()> {
    let dtrain = dataset.subset(train);
    if !(dtrain.weights().iter().sum::<f64>() > 0.0) {
        return Err(AlqrError::DegenerateWeights(format!("fold {fold} has no weighted training rows")));
    }
    let l_train = dtrain.l();
    let l_eval = dataset.l().select_rows(eval);
    let a_eval: Vec<f64> = eval.iter().map(|&i| dataset.a()[i]).collect();
    let (y_tr, a_tr, w_tr) = (dtrain.y(), dtrain.a(), dtrain.weights());
    let seed = req.seed;

    let family = if binary { MeanFamily::Binary } else { MeanFamily::Continuous };
    let m_model = fit_mean_learner(l_train, a_tr, family, w_tr, derive_seed(seed, STREAM_EXPOSURE_MEAN + fold), mopts)?;
    let m_eval = m_model.predict_all(&l_eval);
    let m_train = m_model.predict_all(l_train);
    for (k, &i) in eval.iter().enumerate() {
        buf.m[i] = m_eval[k];
    }

    let t = req.taus.len();
    // Per level: eval q, q1, q0, and in-sample training q.
    let mut q_eval = vec![vec![0.0; eval.len()]; t];
    let mut q1_eval = vec![vec![0.0; eval.len()]; t];
    let mut q0_eval = vec![vec![0.0; eval.len()]; t];
    let mut q_train = vec![vec![0.0; train.len()]; t];
    let mut v_eval: Vec<Option<Vec<f64>>> = vec![None; t];
    let mut beta_eval = vec![0.0; t];
    // rows interpolated by a parametric fit, per τ
    let mut interpolated: Vec<Vec<usize>> = vec![Vec::new(); t];

    match req.learner {
        QuantileLearner::Forest => {
            let feats = dtrain.exposure_covariate_design();
            let forest = fit_quantile_forest(
                &feats,
                y_tr,
                w_tr,
                &quantile_forest_params(settings),
                derive_seed(seed, STREAM_QUANTILE + fold),
            )?;
            let p = dataset.p();
            let mut row = vec![0.0; p + 1];
            for (k, &i) in eval.iter().enumerate() {
                row[1..].copy_from_slice(dataset.l().row(i));
                if binary {
                    row[0] = 1.0;
                    let q1 = forest.predict_quantiles(&row, req.taus)?;
                    row[0] = 0.0;
                    let q0 = forest.predict_quantiles(&row, req.taus)?;
                    for j in 0..t {
                        q1_eval[j][k] = q1[j];
                        q0_eval[j][k] = q0[j];
                        q_eval[j][k] = if a_eval[k] == 1.0 { q1[j] } else { q0[j] };
                    }
                } else {
                    row[0] = a_eval[k];
                    let q = forest.predict_quantiles(&row, req.taus)?;
                    for j in 0..t {
                        q_eval[j][k] = q[j];
                    }
                }
            }
            // Out-of-bag fits for the training rows, so the residuals used for
            // the density are not shrunk by each row's own leaf membership.
            for r in 0..train.len() {
                let q = forest.predict_quantiles_oob(r, feats.row(r), req.taus)?;
                for j in 0..t {
                    q_train[j][r] = q[j];
                }
            }
        }
        QuantileLearner::Stepwise => {
            for j in 0..t {
                let fit = stepwise_qr_aic(&dtrain, req.taus[j], true)?;
                beta_eval[j] = fit.exposure_coef;
                interpolated[j] = fit.basis.clone();
                let mut v = vec![0.0; eval.len()];
                for (k, &i) in eval.iter().enumerate() {
                    let lr = dataset.l().row(i);
                    q_eval[j][k] = fit.predict(a_eval[k], lr);
                    q1_eval[j][k] = fit.predict(1.0, lr);
                    q0_eval[j][k] = fit.predict(0.0, lr);
                    v[k] = fit.exposure_coef * m_eval[k] + fit.covariate_part(lr);
                }
                v_eval[j] = Some(v);
                for r in 0..train.len() {
                    q_train[j][r] = fit.predict(a_tr[r], l_train.row(r));
                }
            }
        }
    }

    let floor = density_floor(y_tr, w_tr, settings.density_floor_factor);
    for j in 0..t {
        let resid: Vec<f64> = (0..train.len()).map(|r| y_tr[r] - q_train[j][r]).collect();
        let dens = parametric_residual_density(&resid, w_tr, &interpolated[j], floor)?;
        buf.floored[j] |= dens.floored;

        let v = match v_eval[j].take() {
            Some(v) => v,
            None if binary => {
                (0..eval.len()).map(|k| q1_eval[j][k] * m_eval[k] + q0_eval[j][k] * (1.0 - m_eval[k])).collect()
            }
            None => {
                let model = fit_mean_learner(
                    l_train,
                    &q_train[j],
                    MeanFamily::Continuous,
                    w_tr,
                    derive_seed(seed, STREAM_V + 1000 * fold + j as u64),
                    mopts,
                )?;
                model.predict_all(&l_eval)
            }
        };

        let v_log = if req.link == Link::Log {
            check_positive(&q_eval[j], eval)?;
            if binary {
                check_positive(&q1_eval[j], eval)?;
                check_positive(&q0_eval[j], eval)?;
                Some(
                    (0..eval.len())
                        .map(|k| q1_eval[j][k].ln() * m_eval[k] + q0_eval[j][k].ln() * (1.0 - m_eval[k]))
                        .collect::<Vec<_>>(),
                )
            } else {
                check_positive(&q_train[j], train)?;
                let logs: Vec<f64> = q_train[j].iter().map(|v| v.ln()).collect();
                let model: MeanModel = fit_mean_learner(
                    l_train,
                    &logs,
                    MeanFamily::Continuous,
                    w_tr,
                    derive_seed(seed, STREAM_LOG_V + 1000 * fold + j as u64),
                    mopts,
                )?;
                Some(model.predict_all(&l_eval))
            }
        } else {
            None
        };

        let h = if req.need_h {
            let wt: Vec<f64> = (0..train.len()).map(|r| (a_tr[r] - m_train[r]) / dens.value_at_zero).collect();
            let model = fit_mean_learner(
                l_train,
                &wt,
                MeanFamily::Continuous,
                w_tr,
                derive_seed(seed, STREAM_H + 1000 * fold + j as u64),
                mopts,
            )?;
            Some(model.predict_all(&l_eval))
        } else {
            None
        };

        for (k, &i) in eval.iter().enumerate() {
            buf.q[j][i] = q_eval[j][k];
            buf.q1[j][i] = q1_eval[j][k];
            buf.q0[j][i] = q0_eval[j][k];
            buf.v[j][i] = v[k];
            buf.d[j][i] = dens.value_at_zero;
            buf.beta[j][i] = beta_eval[j];
            if let Some(vl) = &v_log {
                buf.v_log[j][i] = vl[k];
            }
            if let Some(h) = &h {
                buf.h[j][i] = h[k];
            }
        }
    }
    Ok(())
}

use alqr_core::engine::{dml_estimate, estimate_nuisances};
use alqr_core::linalg::Design;
use alqr_core::rng::rng_from_seed;
use alqr_core::simulation::{DgpSpec, ExperimentId};
use alqr_core::targeting::{
    clever_covariate, one_step_with_influence, shifted_sum, solve_epsilon, solve_epsilon_detail, targeting_sum,
    tmle_binary, tmle_binary_with_influence, tmle_continuous_onestep,
};
use alqr_core::{
    make_folds, AlqrError, Dataset, EstimatorConfig, EstimatorKind, ExposureKind, LearnerSettings, Link, NuisanceFits,
    TmleMode,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn clever_covariate_examples() {
    assert_eq!(clever_covariate(1.0, 0.5, 0.5), 1.0);
    assert_eq!(clever_covariate(0.25, 0.25, 0.1), 0.0);
    let f0 = 1e-3;
    assert_eq!(clever_covariate(1.5, 0.5, f0), 1.0 / f0);
}

#[test]
fn targeting_sum_examples() {
    let s = targeting_sum(&[3.0, 4.0, 5.0], &[0.0; 3], &[1.0, 2.0, 3.0], 0.3, &[1.0; 3]);
    assert!((s - 0.3 * 2.0).abs() < 1e-15);
    assert_eq!(targeting_sum(&[3.0, -4.0], &[0.0; 2], &[0.0; 2], 0.3, &[1.0; 2]), 0.0);
    assert_eq!(targeting_sum(&[0.0, 2.0], &[0.0, 0.0], &[1.0, 1.0], 0.5, &[1.0, 1.0]), 0.0);
}

#[test]
fn solve_epsilon_examples() {
    assert_eq!(solve_epsilon(&[0.0, 2.0], &[0.0, 0.0], &[1.0, 1.0], 0.5, &[1.0, 1.0]).unwrap(), 0.0);
    assert_eq!(solve_epsilon(&[2.0], &[0.0], &[1.0], 0.5, &[1.0]).unwrap(), 0.0);
    assert!(matches!(
        solve_epsilon(&[1.0, 2.0], &[0.0; 2], &[0.0; 2], 0.5, &[1.0; 2]),
        Err(AlqrError::AllZeroCleverCovariates)
    ));
}

/// Minimal |S| over a dense grid spanning every breakpoint plus margins.
fn grid_minimum(y: &[f64], q: &[f64], w: &[f64], tau: f64, om: &[f64], points: usize) -> f64 {
    let bps: Vec<f64> = (0..y.len()).filter(|&i| w[i] != 0.0).map(|i| (y[i] - q[i]) / w[i]).collect();
    let lo = bps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = bps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = (hi - lo).max(1.0);
    let (lo, hi) = (lo - pad, hi + pad);
    let mut best = f64::INFINITY;
    for k in 0..=points {
        let e = lo + (hi - lo) * k as f64 / points as f64;
        best = best.min(shifted_sum(y, q, w, tau, om, e).abs());
    }
    for &b in &bps {
        best = best.min(shifted_sum(y, q, w, tau, om, b).abs());
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn epsilon_is_a_global_minimizer(seed in any::<u64>(), n in 1usize..=20, tau in 0.05f64..0.95) {
        let mut rng = rng_from_seed(seed);
        // Integer-valued residuals and clever covariates keep breakpoints well
        // separated relative to the grid spacing.
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-20..=20) as f64).collect();
        let q = vec![0.0; n];
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64).collect();
        if w.iter().all(|&v| v == 0.0) {
            w[0] = 1.0;
        }
        let om: Vec<f64> = (0..n).map(|_| rng.random_range(1..=3) as f64).collect();
        let sol = solve_epsilon_detail(&y, &q, &w, tau, &om).unwrap();
        prop_assert_eq!(sol.abs_sum, shifted_sum(&y, &q, &w, tau, &om, sol.epsilon).abs());
        let grid = grid_minimum(&y, &q, &w, tau, &om, 20_000);
        prop_assert!(sol.abs_sum <= grid + 1e-12, "solver {} grid {}", sol.abs_sum, grid);
    }
}

fn tiny_binary() -> (Dataset, NuisanceFits) {
    // S(0) = 0: within each exposure level one row lies below its quantile
    // and one above.
    let a = vec![1.0, 1.0, 0.0, 0.0];
    let y = vec![0.5, 3.0, 0.2, 2.0];
    let d = Dataset::new(y, a.clone(), Design::from_fn(4, 1, |i, _| i as f64), ExposureKind::Binary, None).unwrap();
    let m = vec![0.5; 4];
    let q1 = vec![1.0, 1.5, 1.2, 1.1];
    let q0 = vec![0.4, 0.6, 0.9, 0.7];
    let q: Vec<f64> = (0..4).map(|i| if a[i] == 1.0 { q1[i] } else { q0[i] }).collect();
    let v: Vec<f64> = (0..4).map(|i| q1[i] * m[i] + q0[i] * (1.0 - m[i])).collect();
    let n = NuisanceFits {
        tau: 0.5,
        m,
        q,
        v,
        d: vec![0.4; 4],
        q1: Some(q1),
        q0: Some(q0),
        v_log: None,
        h: Some(vec![0.3, -0.2, 0.1, 0.0]),
        beta: None,
        fold_of: vec![0; 4],
        fold_seed: 0,
        folds: 1,
        stratified: false,
        density_floored: false,
    };
    (d, n)
}

#[test]
fn targeting_is_a_no_op_when_the_equation_holds() {
    let (d, n) = tiny_binary();
    let dml = dml_estimate(&n, &d, 0.5, Link::Identity).unwrap();
    for mode in [TmleMode::IterateToConvergence, TmleMode::OneStep] {
        let mut cfg = EstimatorConfig::new(0.5, EstimatorKind::Tmle);
        cfg.tmle_mode = mode;
        let (out, _, state) =
            tmle_binary_with_influence(&d, &n, 0.5, Link::Identity, &cfg.learners, cfg.tmle_mode).unwrap();
        assert_eq!(out.diagnostics.n_iterations, 0);
        assert_eq!(state.q_tilde, n.q);
        assert_eq!(out.psi_hat, dml.psi_hat);
        assert_eq!(out.se, dml.se);
    }
}

#[test]
fn one_step_with_zero_epsilon_matches_dml() {
    let (d, n) = tiny_binary();
    let dc = Dataset::new(d.y().to_vec(), d.a().to_vec(), d.l().clone(), ExposureKind::Continuous, None).unwrap();
    let cfg = EstimatorConfig::new(0.5, EstimatorKind::Tmle);
    let out = tmle_continuous_onestep(&dc, &n, 0.5, &cfg).unwrap();
    assert_eq!(out.diagnostics.epsilon_trace, vec![0.0]);
    assert_eq!(out.psi_hat, dml_estimate(&n, &dc, 0.5, Link::Identity).unwrap().psi_hat);
}

#[test]
fn one_step_with_zero_h_only_moves_q() {
    let y = vec![2.0, 2.5, 3.0, 4.0];
    let a = vec![1.0, 0.3, -0.4, 2.0];
    let d = Dataset::new(y.clone(), a.clone(), Design::zeros(4, 1), ExposureKind::Continuous, None).unwrap();
    let m = vec![0.2, 0.1, 0.0, 0.5];
    let (q, v, dd) = (vec![0.0; 4], vec![0.1, -0.2, 0.3, 0.0], vec![0.5; 4]);
    let n = NuisanceFits {
        tau: 0.5,
        m: m.clone(),
        q: q.clone(),
        v: v.clone(),
        d: dd.clone(),
        q1: None,
        q0: None,
        v_log: None,
        h: Some(vec![0.0; 4]),
        beta: None,
        fold_of: vec![0; 4],
        fold_seed: 0,
        folds: 1,
        stratified: false,
        density_floored: false,
    };
    let (out, _) =
        one_step_with_influence(&d, &n, 0.5, Link::Identity, &LearnerSettings::default(), EstimatorKind::Tmle).unwrap();
    let eps = out.diagnostics.epsilon_trace[0];
    assert!(eps != 0.0);
    // direct substitution with q̃ = q + εw and ṽ = v
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..4 {
        let e = a[i] - m[i];
        let qt = q[i] + eps * e / dd[i];
        let ind = if y[i] <= qt { 1.0 } else { 0.0 };
        num += e * (qt - v[i] + (0.5 - ind) / dd[i]);
        den += e * e;
    }
    assert!((out.psi_hat - num / den).abs() < 1e-12);
}

#[test]
fn iterative_targeting_trace() {
    let d = DgpSpec::new(ExperimentId::Exp1Homoscedastic, 300).generate(17).dataset;
    let mut cfg = EstimatorConfig::new(0.5, EstimatorKind::Tmle);
    cfg.learners.num_trees = 40;
    cfg.learners.mean_trees = 20;
    let plan = make_folds(&d, 5, 1).unwrap();
    let n = estimate_nuisances(&d, 0.5, &cfg, &plan).unwrap();
    let (out, _, state) =
        tmle_binary_with_influence(&d, &n, 0.5, Link::Identity, &cfg.learners, TmleMode::IterateToConvergence).unwrap();
    assert!(!state.s_trace.is_empty());
    for w in state.s_trace.windows(2) {
        assert!(w[1] < w[0], "{:?}", state.s_trace);
    }
    assert_eq!(state.s_trace.len(), out.diagnostics.n_iterations);
    let mean_abs_w = state.w.iter().map(|v| v.abs()).sum::<f64>() / state.w.len() as f64;
    let tol = cfg.learners.targeting_tol_factor * mean_abs_w;
    let last = *state.s_trace.last().unwrap();
    assert!(out.diagnostics.targeting_residual.abs() <= tol.max(last) * (1.0 + 1e-9) + 1e-15);
    assert!(state.q_tilde.iter().all(|v| v.is_finite()));

    let one = tmle_binary(&d, &n, 0.5, &EstimatorConfig { tmle_mode: TmleMode::OneStep, ..cfg.clone() }).unwrap();
    assert!(one.diagnostics.n_iterations <= 1);
}

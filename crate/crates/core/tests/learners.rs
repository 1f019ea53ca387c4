use alqr_core::learners::density::{density_floor, residual_density_with_outcome, DensityOptions};
use alqr_core::learners::qr::mean_check_loss;
use alqr_core::learners::stepwise::fit_exposure_qr;
use alqr_core::learners::{
    check_loss, fit_mean_learner, fit_parametric_qr, fit_quantile_forest, qf_predict, residual_density_at_quantile,
    stepwise_qr_aic, ForestParams, MeanFamily, MeanKind, MeanLearnerOptions,
};
use alqr_core::linalg::Design;
use alqr_core::rng::rng_from_seed;
use alqr_core::{Dataset, ExposureKind};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[test]
fn check_loss_examples() {
    assert_eq!(check_loss(2.0, 0.5), 1.0);
    assert_eq!(check_loss(-2.0, 0.5), 1.0);
    assert!((check_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
    assert_eq!(check_loss(0.0, 0.3), 0.0);
}

#[test]
fn qr_examples() {
    let ones = Design::from_fn(3, 1, |_, _| 1.0);
    let fit = fit_parametric_qr(&ones, &[1.0, 2.0, 9.0], 0.5, &[1.0; 3]).unwrap();
    assert_eq!(fit.coefficients, vec![2.0]);

    let x = Design::from_row_major(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
    let fit = fit_parametric_qr(&x, &[0.0, 1.0, 2.0], 0.25, &[1.0; 3]).unwrap();
    assert!(fit.coefficients[0].abs() < 1e-12 && (fit.coefficients[1] - 1.0).abs() < 1e-12);
    assert!(fit.objective.abs() < 1e-12);

    // Flat objective on [3, 4]: scan every breakpoint for the smallest minimizer.
    let y = [1.0, 2.0, 3.0, 4.0];
    let ones = Design::from_fn(4, 1, |_, _| 1.0);
    let fit = fit_parametric_qr(&ones, &y, 0.75, &[1.0; 4]).unwrap();
    let loss = |b: f64| y.iter().map(|v| check_loss(v - b, 0.75)).sum::<f64>();
    let best = y.iter().map(|&b| loss(b)).fold(f64::INFINITY, f64::min);
    let smallest = *y.iter().find(|&&b| loss(b) == best).unwrap();
    assert_eq!(fit.coefficients[0], smallest);
    assert_eq!(smallest, 3.0);
}

/// Minimum of the check loss over every vertex (every pair of interpolated
/// rows) of a two-coefficient model.
fn brute_force_line(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let n = x.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            if x[i] == x[j] {
                continue;
            }
            let slope = (y[j] - y[i]) / (x[j] - x[i]);
            let icpt = y[i] - slope * x[i];
            let l: f64 = (0..n).map(|k| check_loss(y[k] - icpt - slope * x[k], tau)).sum::<f64>() / n as f64;
            best = best.min(l);
        }
    }
    best
}

fn forest_features(n: usize, seed: u64) -> (Design, Vec<f64>) {
    let mut rng = rng_from_seed(seed);
    let x = Design::from_fn(n, 3, |_, _| normal(&mut rng));
    let y = (0..n).map(|i| x.get(i, 0) * 2.0 + x.get(i, 1).sin() + normal(&mut rng)).collect();
    (x, y)
}

#[test]
fn forest_examples() {
    let x = Design::from_fn(20, 2, |i, j| (i + j) as f64);
    let f = fit_quantile_forest(&x, &[4.5; 20], &[1.0; 20], &ForestParams { num_trees: 10, ..Default::default() }, 3)
        .unwrap();
    for t in [0.1, 0.5, 0.9] {
        assert_eq!(qf_predict(&f, &[3.0, -1.0], t).unwrap(), 4.5);
    }
    // A single tree that cannot split (min_leaf above n/2) is one leaf over
    // every row: the prediction is the lower weighted median.
    let x = Design::from_fn(4, 1, |i, _| i as f64);
    let params = ForestParams { num_trees: 1, min_leaf: 4, mtry: None, subsample: 1.0 };
    let f = fit_quantile_forest(&x, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &params, 0).unwrap();
    assert_eq!(qf_predict(&f, &[0.0], 0.5).unwrap(), 2.0);
}

#[test]
fn forest_is_deterministic() {
    let (x, y) = forest_features(120, 4);
    let p = ForestParams { num_trees: 30, ..Default::default() };
    let a = fit_quantile_forest(&x, &y, &vec![1.0; 120], &p, 11).unwrap();
    let b = fit_quantile_forest(&x, &y, &vec![1.0; 120], &p, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mean_learner_matches_least_squares() {
    let n = 300;
    let mut rng = rng_from_seed(8);
    let x = Design::from_fn(n, 3, |_, _| normal(&mut rng));
    let target: Vec<f64> = (0..n).map(|i| 0.5 - x.get(i, 0) + 2.0 * x.get(i, 1) + 0.25 * x.get(i, 2)).collect();
    let model = fit_mean_learner(&x, &target, MeanFamily::Continuous, &vec![1.0; n], 1, &MeanLearnerOptions::default())
        .unwrap();
    assert_eq!(model.kind, MeanKind::Linear);
    let xm = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { x.get(i, j - 1) });
    let beta = xm.clone().svd(true, true).solve(&DVector::from_vec(target.clone()), 1e-14).unwrap();
    let fitted = &xm * beta;
    for i in 0..n {
        assert!((model.predict(x.row(i)) - fitted[i]).abs() < 1e-6);
    }
}

#[test]
fn mean_learner_edge_cases() {
    let x = Design::from_fn(30, 1, |i, _| i as f64);
    let m =
        fit_mean_learner(&x, &[1.0; 30], MeanFamily::Binary, &[1.0; 30], 0, &MeanLearnerOptions::default()).unwrap();
    assert_eq!(m.predict(&[3.0]), 0.99);
    let x = Design::from_fn(5, 1, |i, _| i as f64);
    let m = fit_mean_learner(&x, &[0.0, 1.0, 1.5, 3.0, 4.0], MeanFamily::Continuous, &[1.0; 5], 0, &Default::default())
        .unwrap();
    assert_eq!(m.kind, MeanKind::Linear);
}

#[test]
fn density_examples() {
    let d = residual_density_at_quantile(&[0.0], &[1.0], 1e-9, Some(1.0)).unwrap();
    assert!((d.value_at_zero - 0.398_942_280_401_432_7).abs() < 1e-15);
    let d = residual_density_at_quantile(&[-1.0, 1.0], &[1.0, 1.0], 1e-9, Some(1.0)).unwrap();
    let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    assert!((d.value_at_zero - phi1).abs() < 1e-15);
    let r: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
    let d = residual_density_at_quantile(&r, &[1.0; 50], 1e-3, Some(0.5)).unwrap();
    assert!(d.floored && d.value_at_zero == 1e-3);
}

fn two_covariate_sample(seed: u64) -> Dataset {
    let n = 400;
    let mut rng = rng_from_seed(seed);
    let l = Design::from_fn(n, 2, |_, _| normal(&mut rng));
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| a[i] + 3.0 * l.get(i, 0) + 0.5 * normal(&mut rng)).collect();
    Dataset::new(y, a, l, ExposureKind::Continuous, None).unwrap()
}

#[test]
fn stepwise_agrees_with_exhaustive_search() {
    let subsets: [&[usize]; 4] = [&[], &[0], &[1], &[0, 1]];
    for seed in [21, 22, 23, 24] {
        let d = two_covariate_sample(seed);
        let fit = stepwise_qr_aic(&d, 0.5, true).unwrap();
        let best = subsets
            .iter()
            .map(|s| fit_exposure_qr(&d, 0.5, s, true).unwrap())
            .min_by(|x, y| x.aic.total_cmp(&y.aic))
            .unwrap();
        assert_eq!(best.selected, fit.selected, "seed {seed}");
        assert!(fit.selected.contains(&0));
    }
    // on this instance the noise column does not pay for its AIC penalty
    let fit = stepwise_qr_aic(&two_covariate_sample(22), 0.5, true).unwrap();
    assert_eq!(fit.selected, vec![0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn qr_first_order_condition(seed in any::<u64>(), n in 8usize..80, k in 1usize..4, tau in 0.05f64..0.95) {
        let mut rng = rng_from_seed(seed);
        let x = Design::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let y: Vec<f64> = (0..n).map(|i| x.row(i).iter().sum::<f64>() + normal(&mut rng)).collect();
        let fit = fit_parametric_qr(&x, &y, tau, &vec![1.0; n]).unwrap();
        let r: Vec<f64> = (0..n).map(|i| y[i] - x.row(i).iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum::<f64>()).collect();
        let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let neg = r.iter().filter(|&&v| v < -1e-9 * scale).count() as f64 / n as f64;
        let nonpos = r.iter().filter(|&&v| v <= 1e-9 * scale).count() as f64 / n as f64;
        let slack = (k + 1) as f64 / n as f64;
        prop_assert!(neg <= tau + slack, "neg {neg} tau {tau}");
        prop_assert!(nonpos >= tau - slack, "nonpos {nonpos} tau {tau}");
        prop_assert!(fit.objective >= 0.0);
        prop_assert!((mean_check_loss(&r, tau, &vec![1.0; n]) - fit.objective).abs() <= 1e-9 * scale);
    }

    #[test]
    fn qr_matches_vertex_enumeration(seed in any::<u64>(), n in 3usize..14, tau in 0.05f64..0.95) {
        let mut rng = rng_from_seed(seed);
        let xs: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| xs[i] + normal(&mut rng)).collect();
        let x = Design::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let fit = fit_parametric_qr(&x, &y, tau, &vec![1.0; n]).unwrap();
        let best = brute_force_line(&xs, &y, tau);
        prop_assert!(fit.objective <= best * (1.0 + 1e-6) + 1e-12, "{} vs {}", fit.objective, best);
    }

    #[test]
    fn forest_monotone_and_bounded(seed in any::<u64>(), n in 15usize..80) {
        let (x, y) = forest_features(n, seed);
        let f = fit_quantile_forest(&x, &y, &vec![1.0; n], &ForestParams { num_trees: 15, ..Default::default() }, seed).unwrap();
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mut rng = rng_from_seed(seed ^ 1);
        for _ in 0..5 {
            let q: Vec<f64> = (0..3).map(|_| 2.0 * normal(&mut rng)).collect();
            let taus = [0.05, 0.25, 0.5, 0.75, 0.95];
            let preds = f.predict_quantiles(&q, &taus).unwrap();
            for w in preds.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(preds.iter().all(|&p| lo <= p && p <= hi));
        }
        for t in &f.trees {
            prop_assert!(t.min_leaf_size() >= 5);
        }
    }

    #[test]
    fn stepwise_never_drops_exposure(seed in any::<u64>(), p in 0usize..5) {
        let n = 60;
        let mut rng = rng_from_seed(seed);
        let l = Design::from_fn(n, p, |_, _| normal(&mut rng));
        let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.3 * a[i] + if p > 0 { l.get(i, 0) } else { 0.0 } + normal(&mut rng)).collect();
        let d = Dataset::new(y, a, l, ExposureKind::Continuous, None).unwrap();
        let fit = stepwise_qr_aic(&d, 0.5, true).unwrap();
        let full = fit_exposure_qr(&d, 0.5, &(0..p).collect::<Vec<_>>(), true).unwrap();
        prop_assert!(fit.includes_exposure);
        prop_assert_eq!(fit.exposure_coef, fit.coefficients[1]);
        prop_assert!(fit.aic <= full.aic);
        prop_assert_eq!(fit.clone(), stepwise_qr_aic(&d, 0.5, true).unwrap());
    }

    #[test]
    fn density_permutation_and_scale(seed in any::<u64>(), n in 5usize..60, shift in 0i32..6) {
        let mut rng = rng_from_seed(seed);
        let r: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let w = vec![1.0; n];
        let opts = DensityOptions::default();
        let base = residual_density_with_outcome(&r, &w, &y, &w, &opts).unwrap();
        let mut rp = r.clone();
        rp.reverse();
        rp.rotate_left(n / 3);
        let perm = residual_density_with_outcome(&rp, &w, &y, &w, &opts).unwrap();
        prop_assert!((perm.value_at_zero - base.value_at_zero).abs() <= 1e-12 * base.value_at_zero);
        let c = 2f64.powi(shift - 2) * 1.5;
        let rs: Vec<f64> = r.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let scaled = residual_density_with_outcome(&rs, &w, &ys, &w, &opts).unwrap();
        prop_assert!((scaled.value_at_zero * c - base.value_at_zero).abs() <= 1e-10 * base.value_at_zero);
        prop_assert!((density_floor(&ys, &w, 1e-3) * c - base.floor).abs() <= 1e-12 * base.floor);
    }
}

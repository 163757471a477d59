use nalgebra::DMatrix;
use proptest::prelude::*;

use metacate::linear::{fit_interaction_ols, linear_cate, Moderators};
use metacate::meta::{
    meta_analyze, pool_cate, prediction_interval, reml_theta2, restricted_log_likelihood, MetaInput,
};
use metacate::model::{CovariateProfile, TrialDataset, TrialRow};

fn meta_inputs() -> impl Strategy<Value = MetaInput<f64>> {
    (3usize..12)
        .prop_flat_map(|k| {
            (
                prop::collection::vec(-10.0..10.0f64, k),
                prop::collection::vec(0.01..5.0f64, k),
            )
        })
        .prop_map(|(t, v)| MetaInput::from_slices(1, &t, &v).unwrap())
}

proptest! {
    #[test]
    fn pooled_estimate_is_a_convex_combination(input in meta_inputs(), theta2 in 0.0..10.0f64) {
        let pooled = pool_cate(&input, theta2).unwrap();
        let (lo, hi) = input.estimates().iter().map(|e| e.tau_hat).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), t| (l.min(t), h.max(t)));
        prop_assert!(lo - 1e-12 <= pooled.tau_pooled && pooled.tau_pooled <= hi + 1e-12);
        let total: f64 = pooled.normalized_weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interval_widens_as_alpha_shrinks(input in meta_inputs()) {
        let theta2 = reml_theta2(&input).unwrap();
        prop_assert!(theta2 >= 0.0);
        let pooled = pool_cate(&input, theta2).unwrap();
        let mut last = 0.0;
        for alpha in [0.5, 0.2, 0.1, 0.05, 0.01] {
            let w = prediction_interval(&pooled, alpha).unwrap().width();
            prop_assert!(w > last);
            last = w;
        }
    }

    #[test]
    fn reml_is_a_local_maximum(input in meta_inputs()) {
        let t = reml_theta2(&input).unwrap();
        let ll = |x: f64| restricted_log_likelihood(x, &input).unwrap();
        let here = ll(t);
        prop_assert!(here >= ll(t + 1e-3) - 1e-9);
        if t > 1e-3 {
            prop_assert!(here >= ll(t - 1e-3) - 1e-9);
        }
    }

    #[test]
    fn interval_contains_pooled_estimate(input in meta_inputs()) {
        let (pooled, pi) = meta_analyze(&input, 0.05).unwrap();
        let pi = pi.unwrap();
        prop_assert!(pi.contains(pooled.tau_pooled));
        prop_assert_eq!(pi.df, input.k() - 2);
    }
}

fn noisy_trial(seed: u64, n: usize) -> TrialDataset<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = i % 2 == 1;
            let y = x[0] - x[2] + if a { 1.0 + x[1] } else { 0.0 } + r.random_range(-1.0..1.0);
            TrialRow::new(y, a, x)
        })
        .collect();
    TrialDataset::new(1, vec!["x0".into(), "x1".into(), "x2".into()], rows)
}

#[test]
fn ols_covariance_is_symmetric_positive_semidefinite() {
    for seed in 0..10 {
        let fit = fit_interaction_ols(&noisy_trial(seed, 60), &Moderators::All).unwrap();
        let q = fit.coefficients.len();
        let m = DMatrix::from_fn(q, q, |i, j| fit.covariance[i][j]);
        assert!((&m - m.transpose()).amax() < 1e-12);
        let eig = m.symmetric_eigen().eigenvalues;
        assert!(eig.min() > -1e-12 * eig.max(), "eigenvalues {eig}");
    }
}

#[test]
fn linear_se2_is_nonnegative_everywhere() {
    let fit = fit_interaction_ols(&noisy_trial(42, 80), &Moderators::Indices(vec![1])).unwrap();
    for i in 0..50 {
        let x = vec![f64::from(i) - 25.0, f64::from(i) * 0.3, -1.0];
        assert!(linear_cate(&fit, &CovariateProfile::new(i as u32, x)).unwrap().se2 >= 0.0);
    }
}

#[test]
fn reml_on_three_points_matches_fine_grid() {
    let input = MetaInput::from_slices(1, &[0.0, 1.0, 2.0], &[0.5; 3]).unwrap();
    let ll = |t: f64| restricted_log_likelihood(t, &input).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=20_000_000u32 {
        let t = f64::from(i) * 1e-6;
        let v = ll(t);
        if v > best.0 {
            best = (v, t);
        }
    }
    assert!((reml_theta2(&input).unwrap() - best.1).abs() <= 1e-4);
}

#[test]
fn fewer_studies_give_wider_intervals() {
    let wide = MetaInput::from_slices(1, &[0.0, 1.0, 2.0], &[0.5; 3]).unwrap();
    let tau: Vec<f64> = (0..30).map(|i| f64::from(i % 3)).collect();
    let narrow = MetaInput::from_slices(1, &tau, &[0.5; 30]).unwrap();
    let width = |m: &MetaInput<f64>| {
        let p = pool_cate(m, 1.0).unwrap();
        let p = metacate::model::PooledCate { var_pooled: 0.1, ..p };
        prediction_interval(&p, 0.05).unwrap().width()
    };
    assert!(width(&wide) > width(&narrow));
}

#[test]
fn pooling_limits() {
    let dominant = MetaInput::from_slices(1, &[3.0, 0.0, 1.0], &[1e-8, 1.0, 1.0]).unwrap();
    let t: f64 = pool_cate(&dominant, 0.0).unwrap().tau_pooled;
    assert!((t - 3.0).abs() < 1e-4);
    let unequal = MetaInput::from_slices(1, &[3.0, 0.0, 1.5], &[0.1, 2.0, 5.0]).unwrap();
    let t: f64 = pool_cate(&unequal, 1e12).unwrap().tau_pooled;
    assert!((t - 1.5).abs() < 1e-6);
}

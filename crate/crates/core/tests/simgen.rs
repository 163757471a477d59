use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metacate::sim::generate::{
    draw_study_effects, gen_covariates, gen_outcomes, gen_target_profiles, gen_trial_covariates,
    gen_treatments, true_cate, StudyEffects,
};
use metacate::sim::{CateSetting, CovariateMode, EffectDistribution, EffectScales, SimConfig};

const AGE: usize = 0;
const SEX: usize = 1;

fn column_mean(x: &[Vec<f64>], j: usize) -> f64 {
    x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn same_mode_centres_age_at_zero() {
    let cfg = SimConfig { covariate_mode: CovariateMode::Same, n_per_study: 400, ..SimConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = gen_trial_covariates(&cfg, &mut rng);
        let m = column_mean(&x, AGE);
        assert!(m.abs() <= 3.0 / (x.len() as f64).sqrt(), "age mean {m}");
    }
}

#[test]
fn variable_mode_study_means_spread_by_their_sd() {
    let cfg = SimConfig { n_per_study: 500, ..SimConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let means: Vec<f64> = (0..400).map(|_| column_mean(&gen_trial_covariates(&cfg, &mut rng), AGE)).collect();
    let s = sd(&means);
    assert!((0.17..0.23).contains(&s), "sd of study age means {s}");
}

#[test]
fn binary_columns_stay_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gen_covariates(&[0.0, 0.6784, 0.3043, 0.0, 0.0], 2000, &mut rng);
    assert!(x.iter().all(|r| r[SEX] == 0.0 || r[SEX] == 1.0));
    assert!((column_mean(&x, SEX) - 0.6784).abs() < 0.04);
}

#[test]
fn target_profiles_are_older_and_reproducible() {
    let a = gen_target_profiles(&mut ChaCha8Rng::seed_from_u64(4));
    let b = gen_target_profiles(&mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a, b);
    assert_eq!(a.len(), 100);
    assert!(a.iter().all(|p| p.x.len() == 5));
    let age = a.iter().map(|p| p.x[AGE]).sum::<f64>() / 100.0;
    assert!(age > 0.3, "target mean age {age}");
}

#[test]
fn outcome_noise_and_effect_contrast() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 20_000;
    let x = gen_covariates(&[0.0; 5], n, &mut rng);
    let a = gen_treatments(n, &mut rng);
    let fx = StudyEffects::default();
    let y1 = gen_outcomes(&x, &vec![true; n], CateSetting::Linear, &fx, 0.05, &mut ChaCha8Rng::seed_from_u64(6));
    let y0 = gen_outcomes(&x, &vec![false; n], CateSetting::Linear, &fx, 0.05, &mut ChaCha8Rng::seed_from_u64(6));
    // shared noise draws, so the contrast is the CATE exactly
    for (i, row) in x.iter().enumerate().take(50) {
        assert!((y1[i] - y0[i] - true_cate(row, CateSetting::Linear, &fx)).abs() < 1e-12);
    }
    let y = gen_outcomes(&x, &a, CateSetting::Linear, &fx, 0.05, &mut rng);
    let y_clean = gen_outcomes(&x, &a, CateSetting::Linear, &fx, 0.0, &mut rng);
    let resid: Vec<f64> = y.iter().zip(&y_clean).map(|(a, b)| a - b).collect();
    assert!((sd(&resid) - 0.05).abs() < 0.002);
}

#[test]
fn effect_shifts_are_centred_with_their_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scales = EffectScales::level(2).unwrap();
    let draws: Vec<StudyEffects> =
        (0..20_000).map(|_| draw_study_effects(scales, EffectDistribution::Normal, &mut rng)).collect();
    for (get, sigma) in [
        (&(|e: &StudyEffects| e.a) as &dyn Fn(&StudyEffects) -> f64, scales.sigma_a),
        (&|e: &StudyEffects| e.b, scales.sigma_b),
        (&|e: &StudyEffects| e.c, scales.sigma_c),
    ] {
        let v: Vec<f64> = draws.iter().map(get).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        assert!(m.abs() < 4.0 * sigma / (v.len() as f64).sqrt() + 1e-12);
        assert!((sd(&v) - sigma).abs() < 0.03 * sigma + 1e-12);
    }
    let u: Vec<StudyEffects> =
        (0..5000).map(|_| draw_study_effects(scales, EffectDistribution::Uniform, &mut rng)).collect();
    assert!(u.iter().all(|e| e.a.abs() <= 1.0 && e.b.abs() <= 1.0 && e.c.abs() <= 1.0));
}

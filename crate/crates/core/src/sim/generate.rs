//! Synthetic trials and target profiles.
//!
//! Covariates are `age, sex, smoking, weight, madrs` on a standardized scale.
//! Each study draws its own covariate means, then rows from a multivariate
//! normal with a fixed covariance. Sex and smoking are binary: the latent
//! normal is mapped to a uniform and compared against the study's proportion.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{CateSetting, CovariateMode, EffectDistribution, EffectScales, SimConfig};
use crate::model::{CovariateProfile, TrialDataset, TrialRow};
use crate::special::normal_cdf;

pub const COVARIATE_NAMES: [&str; 5] = ["age", "sex", "smoking", "weight", "madrs"];
pub const AGE: usize = 0;
pub const SEX: usize = 1;
pub const SMOKING: usize = 2;
pub const MADRS: usize = 4;

const BINARY: [bool; 5] = [false, true, true, false, false];

/// Centers of the study-mean distributions; sex and smoking are proportions.
pub const MEAN_CENTERS: [f64; 5] = [0.0, 0.6784, 0.3043, 0.0, 0.0];
/// Across-study standard deviations of the covariate means.
pub const MEAN_SDS: [f64; 5] = [0.2, 0.1, 0.1, 0.5, 0.3];
/// Target population: older, more female, more smokers, heavier, less depressed.
pub const TARGET_SHIFT: [f64; 5] = [0.5, 0.1, 0.1, 0.5, -0.3];
pub const N_TARGET_PROFILES: usize = 100;

/// Unit variances; 0.2 between weight and the sex latent, 0.1 elsewhere.
pub const COVARIANCE: [[f64; 5]; 5] = [
    [1.0, 0.1, 0.1, 0.1, 0.1],
    [0.1, 1.0, 0.1, 0.2, 0.1],
    [0.1, 0.1, 1.0, 0.1, 0.1],
    [0.1, 0.2, 0.1, 1.0, 0.1],
    [0.1, 0.1, 0.1, 0.1, 1.0],
];

/// Lower Cholesky factor of [`COVARIANCE`].
pub fn covariance_cholesky() -> [[f64; 5]; 5] {
    let mut l = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (COVARIANCE[i][i] - s).sqrt();
            } else {
                l[i][j] = (COVARIANCE[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Study-level covariate means for the configured mode.
pub fn draw_study_means(mode: CovariateMode, rng: &mut impl Rng) -> [f64; 5] {
    let mut means = MEAN_CENTERS;
    for (j, m) in means.iter_mut().enumerate() {
        let vary = match mode {
            CovariateMode::Variable => true,
            CovariateMode::Same => false,
            CovariateMode::AgeOnlyVariable => j == AGE,
        };
        if vary {
            let z: f64 = rng.sample(StandardNormal);
            *m += MEAN_SDS[j] * z;
        }
    }
    means
}

/// `n` covariate rows around `means`.
pub fn gen_covariates(means: &[f64; 5], n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let l = covariance_cholesky();
    (0..n)
        .map(|_| {
            let e: [f64; 5] = std::array::from_fn(|_| rng.sample(StandardNormal));
            (0..5)
                .map(|j| {
                    let z: f64 = (0..=j).map(|k| l[j][k] * e[k]).sum();
                    if BINARY[j] {
                        let p = means[j].clamp(0.0, 1.0);
                        if normal_cdf(z) < p { 1.0 } else { 0.0 }
                    } else {
                        means[j] + z
                    }
                })
                .collect()
        })
        .collect()
}

/// Covariates for one trial: study means, then rows.
pub fn gen_trial_covariates(config: &SimConfig, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let means = draw_study_means(config.covariate_mode, rng);
    gen_covariates(&means, config.n_per_study, rng)
}

/// The target sample, ids `1..=100`.
pub fn gen_target_profiles(rng: &mut impl Rng) -> Vec<CovariateProfile<f64>> {
    let means: [f64; 5] = std::array::from_fn(|j| MEAN_CENTERS[j] + TARGET_SHIFT[j]);
    gen_covariates(&means, N_TARGET_PROFILES, rng)
        .into_iter()
        .enumerate()
        .map(|(i, x)| CovariateProfile::new(i as u32 + 1, x))
        .collect()
}

/// Study-membership shifts of the intercept (`a`), effect (`b`) and
/// age interaction (`c`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StudyEffects {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn draw_study_effects(
    scales: EffectScales,
    distribution: EffectDistribution,
    rng: &mut impl Rng,
) -> StudyEffects {
    match distribution {
        EffectDistribution::Normal => {
            let z: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            StudyEffects {
                a: scales.sigma_a * z[0],
                b: scales.sigma_b * z[1],
                c: scales.sigma_c * z[2],
            }
        }
        EffectDistribution::Uniform => {
            let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            StudyEffects { a: u[0], b: u[1], c: u[2] }
        }
    }
}

pub fn true_cate(x: &[f64], setting: CateSetting, effects: &StudyEffects) -> f64 {
    let age = x[AGE];
    match setting {
        CateSetting::Linear => (2.505 + effects.b) + (0.82 + effects.c) * age,
        CateSetting::Nonlinear => (2.20 + effects.b) * ((0.35 + effects.c) * age).exp(),
    }
}

pub fn main_effect(x: &[f64], setting: CateSetting, effects: &StudyEffects) -> f64 {
    match setting {
        CateSetting::Linear => {
            (-17.40 + effects.a) - 0.13 * x[AGE] - 2.05 * x[MADRS] - 0.11 * x[SEX]
        }
        CateSetting::Nonlinear => (-17.52 + effects.a) - 0.08 * x[AGE],
    }
}

/// `Y = m(X) + A tau(X) + eps`, `eps ~ N(0, noise_sd^2)`.
pub fn gen_outcomes(
    covariates: &[Vec<f64>],
    treatments: &[bool],
    setting: CateSetting,
    effects: &StudyEffects,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    covariates
        .iter()
        .zip(treatments)
        .map(|(x, &a)| {
            let eps: f64 = rng.sample(StandardNormal);
            let tau = if a { true_cate(x, setting, effects) } else { 0.0 };
            main_effect(x, setting, effects) + tau + noise_sd * eps
        })
        .collect()
}

/// Fair-coin treatment assignment.
pub fn gen_treatments(n: usize, rng: &mut impl Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

pub fn assemble_trial(
    study_id: u32,
    covariates: Vec<Vec<f64>>,
    treatments: &[bool],
    outcomes: &[f64],
) -> TrialDataset<f64> {
    let rows = covariates
        .into_iter()
        .zip(treatments)
        .zip(outcomes)
        .map(|((x, &a), &y)| TrialRow::new(y, a, x))
        .collect();
    TrialDataset::new(
        study_id,
        COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cholesky_reproduces_covariance() {
        let l = covariance_cholesky();
        for i in 0..5 {
            for j in 0..5 {
                let v: f64 = (0..5).map(|k| l[i][k] * l[j][k]).sum();
                assert!((v - COVARIANCE[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn effect_formulas() {
        let zero = StudyEffects::default();
        let x0 = [0.0; 5];
        assert_eq!(true_cate(&x0, CateSetting::Linear, &zero), 2.505);
        assert_eq!(true_cate(&x0, CateSetting::Nonlinear, &zero), 2.20);
        let e = StudyEffects { a: 0.0, b: 0.5, c: -0.82 };
        let x1 = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!((true_cate(&x1, CateSetting::Linear, &e) - 3.005).abs() < 1e-15);
        assert_eq!(main_effect(&x0, CateSetting::Linear, &zero), -17.40);
        assert_eq!(main_effect(&x0, CateSetting::Nonlinear, &zero), -17.52);
    }

    #[test]
    fn binary_columns_and_uniform_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = gen_covariates(&MEAN_CENTERS, 500, &mut rng);
        assert!(rows.iter().all(|r| (r[SEX] == 0.0 || r[SEX] == 1.0) && (r[SMOKING] == 0.0 || r[SMOKING] == 1.0)));
        let sex_rate = rows.iter().map(|r| r[SEX]).sum::<f64>() / 500.0;
        assert!((sex_rate - 0.6784).abs() < 0.07);
        let scales = EffectScales::level(3).unwrap();
        for _ in 0..1000 {
            let e = draw_study_effects(scales, EffectDistribution::Uniform, &mut rng);
            assert!([e.a, e.b, e.c].iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

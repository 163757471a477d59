//! Replicated two-stage runs scored against the frozen target CATEs.
//!
//! Target profiles and target effects are drawn once per master seed. Every
//! replication draws fresh studies from streams keyed by (replication, study),
//! so all Stage-1 methods see the same trials and results do not depend on
//! thread scheduling.

use rayon::prelude::*;

use super::config::{BartInterval, CateSetting, SimConfig, Stage1Method};
use super::generate::{
    assemble_trial, draw_study_effects, gen_outcomes, gen_target_profiles, gen_treatments,
    gen_trial_covariates, true_cate, StudyEffects,
};
use crate::bart::{bart_cate_normal, bart_cate_quantile_estimate, fit_bart_slearner};
use crate::error::{Error, Result};
use crate::forest::{fit_causal_forest, forest_cate, ForestParams};
use crate::linear::{fit_interaction_ols, linear_cate};
use crate::meta::{meta_analyze, MetaInput};
use crate::model::{CovariateProfile, StudyCateEstimate, TrialDataset};
use crate::rng::{derive_seed, stream, Purpose};

/// Stream index for study `study` of replication `rep`.
fn study_index(rep: usize, study: usize) -> u64 {
    (rep as u64) * 1024 + study as u64
}

/// Frozen target draws plus the per-replication study effects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueEffectRecord {
    pub target_effects: StudyEffects,
    /// True target CATE, aligned with the profiles.
    pub target_cate: Vec<f64>,
    /// `study_effects[rep][s]`.
    pub study_effects: Vec<Vec<StudyEffects>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMetrics {
    pub profile_id: u32,
    pub method: String,
    pub coverage: f64,
    pub mean_length: f64,
    pub bias: f64,
    pub n_effective_replications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbortedReplication {
    pub replication: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<ProfileMetrics>,
    pub n_replications: usize,
    pub aborted: Vec<AbortedReplication>,
}

impl MetricsTable {
    /// Median of the per-profile coverages that have at least one replication.
    pub fn median_coverage(&self) -> f64 {
        let mut c: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.n_effective_replications > 0)
            .map(|r| r.coverage)
            .collect();
        if c.is_empty() {
            return f64::NAN;
        }
        c.sort_by(|a, b| a.partial_cmp(b).expect("coverage is finite"));
        let m = c.len() / 2;
        if c.len() % 2 == 1 {
            c[m]
        } else {
            0.5 * (c[m - 1] + c[m])
        }
    }

    pub fn mean_length(&self) -> f64 {
        let l: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.n_effective_replications > 0)
            .map(|r| r.mean_length)
            .collect();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub metrics: MetricsTable,
    pub truth: TrueEffectRecord,
    pub profiles: Vec<CovariateProfile<f64>>,
}

/// Target profiles and the target's own effects, frozen for a master seed.
pub fn frozen_target(config: &SimConfig) -> (Vec<CovariateProfile<f64>>, StudyEffects) {
    let profiles = gen_target_profiles(&mut stream(config.master_seed, 0, Purpose::TargetProfiles));
    let effects = draw_study_effects(
        config.scales,
        config.effect_distribution,
        &mut stream(config.master_seed, 0, Purpose::TargetEffects),
    );
    (profiles, effects)
}

/// The K trials of one replication with their study effects.
pub fn gen_replication(config: &SimConfig, rep: usize) -> (Vec<TrialDataset<f64>>, Vec<StudyEffects>) {
    (0..config.k_studies)
        .map(|s| {
            let idx = study_index(rep, s);
            let seed = config.master_seed;
            let effects = draw_study_effects(
                config.scales,
                config.effect_distribution,
                &mut stream(seed, idx, Purpose::StudyEffects),
            );
            let x = gen_trial_covariates(config, &mut stream(seed, idx, Purpose::Covariates));
            let mut out_rng = stream(seed, idx, Purpose::Outcomes);
            let a = gen_treatments(config.n_per_study, &mut out_rng);
            let y = gen_outcomes(&x, &a, config.cate_setting, &effects, config.noise_sd, &mut out_rng);
            (assemble_trial(s as u32 + 1, x, &a, &y), effects)
        })
        .unzip()
}

/// Stage 1 on one study: the study fails as a whole, or yields a result per profile.
/// `truth` carries the study effects and CATE setting the oracle reports;
/// other methods ignore it.
pub fn stage1_study(
    method: &Stage1Method,
    dataset: &TrialDataset<f64>,
    profiles: &[CovariateProfile<f64>],
    seed: u64,
    truth: Option<(&StudyEffects, CateSetting)>,
) -> Result<Vec<Result<StudyCateEstimate<f64>>>> {
    let id = dataset.study_id();
    Ok(match method {
        Stage1Method::Linear(moderators) => {
            let fit = fit_interaction_ols(dataset, moderators)?;
            profiles.iter().map(|p| linear_cate(&fit, p)).collect()
        }
        Stage1Method::Forest(params) => {
            let params = ForestParams { seed, ..params.clone() };
            let model = fit_causal_forest(dataset, &params)?;
            profiles.iter().map(|p| forest_cate(&model, p)).collect()
        }
        Stage1Method::Bart { params, interval } => {
            let params = crate::bart::BartParams { seed, ..params.clone() };
            let post = fit_bart_slearner(dataset, profiles, &params)?;
            profiles
                .iter()
                .map(|p| match interval {
                    BartInterval::Normal => bart_cate_normal(&post, p),
                    BartInterval::Quantile => bart_cate_quantile_estimate(&post, p, 0.95),
                })
                .collect()
        }
        Stage1Method::Oracle { se2 } => {
            let (effects, setting) = truth.ok_or_else(|| {
                Error::Config("the oracle method needs simulated study effects".into())
            })?;
            profiles
                .iter()
                .map(|p| StudyCateEstimate::new(id, p.profile_id, true_cate(&p.x, setting, effects), *se2))
                .collect()
        }
    })
}

/// One prediction interval `(lower, upper, center)` per profile, `None` where
/// Stage 1 or Stage 2 failed for that profile.
type ReplicationIntervals = Vec<Option<(f64, f64, f64)>>;

fn run_replication(
    config: &SimConfig,
    method: &Stage1Method,
    alpha: f64,
    profiles: &[CovariateProfile<f64>],
    rep: usize,
) -> (Vec<StudyEffects>, std::result::Result<ReplicationIntervals, String>) {
    let (trials, effects) = gen_replication(config, rep);
    let mut per_study = Vec::with_capacity(trials.len());
    for (s, (trial, eff)) in trials.iter().zip(&effects).enumerate() {
        let seed = derive_seed(config.master_seed, study_index(rep, s), Purpose::Learner);
        match stage1_study(method, trial, profiles, seed, Some((eff, config.cate_setting))) {
            Ok(v) => per_study.push(v),
            Err(e) => return (effects, Err(format!("study {}: {e}", s + 1))),
        }
    }
    let intervals = profiles
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let estimates: Vec<StudyCateEstimate<f64>> = per_study
                .iter()
                .map(|study| study[j].clone().ok())
                .collect::<Option<_>>()?;
            let input = MetaInput::new(p.profile_id, estimates).ok()?;
            let (_, pi) = meta_analyze(&input, alpha).ok()?;
            pi.map(|pi| (pi.lower, pi.upper, pi.center))
        })
        .collect();
    (effects, Ok(intervals))
}

/// Runs every replication of `config` with one Stage-1 method.
pub fn run_experiment(config: &SimConfig, method: &Stage1Method, alpha: f64) -> Result<ExperimentRun> {
    config.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let (profiles, target_effects) = frozen_target(config);
    let target_cate: Vec<f64> = profiles
        .iter()
        .map(|p| true_cate(&p.x, config.cate_setting, &target_effects))
        .collect();

    let outcomes: Vec<_> = (0..config.n_replications)
        .into_par_iter()
        .map(|rep| run_replication(config, method, alpha, &profiles, rep))
        .collect();

    let n_prof = profiles.len();
    let mut hits = vec![0usize; n_prof];
    let mut n_eff = vec![0usize; n_prof];
    let mut length = vec![0.0; n_prof];
    let mut bias = vec![0.0; n_prof];
    let mut aborted = Vec::new();
    let mut study_effects = Vec::with_capacity(outcomes.len());
    for (rep, (effects, result)) in outcomes.into_iter().enumerate() {
        study_effects.push(effects);
        match result {
            Err(reason) => aborted.push(AbortedReplication { replication: rep, reason }),
            Ok(intervals) => {
                for (j, iv) in intervals.into_iter().enumerate() {
                    let Some((lo, hi, center)) = iv else { continue };
                    n_eff[j] += 1;
                    if lo <= target_cate[j] && target_cate[j] <= hi {
                        hits[j] += 1;
                    }
                    length[j] += hi - lo;
                    bias[j] += center - target_cate[j];
                }
            }
        }
    }
    let rows = profiles
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let n = n_eff[j] as f64;
            ProfileMetrics {
                profile_id: p.profile_id,
                method: method.label().to_string(),
                coverage: hits[j] as f64 / n,
                mean_length: length[j] / n,
                bias: bias[j] / n,
                n_effective_replications: n_eff[j],
            }
        })
        .collect();
    Ok(ExperimentRun {
        metrics: MetricsTable {
            rows,
            n_replications: config.n_replications,
            aborted,
        },
        truth: TrueEffectRecord {
            target_effects,
            target_cate,
            study_effects,
        },
        profiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::Moderators;
    use crate::sim::config::EffectScales;

    fn small() -> SimConfig {
        SimConfig {
            k_studies: 4,
            n_per_study: 120,
            n_replications: 6,
            master_seed: 99,
            ..SimConfig::default()
        }
    }

    #[test]
    fn deterministic_and_frozen_target() {
        let cfg = small();
        let m = Stage1Method::Linear(Moderators::All);
        let a = run_experiment(&cfg, &m, 0.05).unwrap();
        let b = run_experiment(&cfg, &m, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.rows.len(), 100);
        assert!(a.metrics.aborted.is_empty());
        // study draws differ between replications; the target does not depend on them
        assert_ne!(a.truth.study_effects[0], a.truth.study_effects[1]);
        let more = run_experiment(&SimConfig { n_replications: 3, ..cfg }, &m, 0.05).unwrap();
        assert_eq!(more.truth.target_cate, a.truth.target_cate);
        for r in &a.metrics.rows {
            assert!((0.0..=1.0).contains(&r.coverage) && r.mean_length >= 0.0);
        }
    }

    #[test]
    fn zero_heterogeneity_oracle_covers_with_vanishing_length() {
        let cfg = SimConfig {
            scales: EffectScales { sigma_a: 0.0, sigma_b: 0.0, sigma_c: 0.0 },
            heterogeneity_level: 0,
            noise_sd: 0.0,
            ..small()
        };
        let run = run_experiment(&cfg, &Stage1Method::Oracle { se2: 1e-12 }, 0.05).unwrap();
        for r in &run.metrics.rows {
            assert_eq!(r.coverage, 1.0);
            assert!(r.mean_length < 1e-4);
        }
    }

    #[test]
    fn aborted_replications_are_reported() {
        // too few rows per arm for the default forest leaves
        let cfg = SimConfig { n_per_study: 30, n_replications: 2, ..small() };
        let run = run_experiment(&cfg, &Stage1Method::Forest(ForestParams::default()), 0.05).unwrap();
        assert_eq!(run.metrics.aborted.len(), 2);
        assert!(run.metrics.rows.iter().all(|r| r.n_effective_replications == 0));
    }
}

//! The analysis commands as pure functions from parsed inputs to artifacts.
//! File handling, timing and exit codes belong to the binary.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{write_metrics, PredictionRow, SignFlag};
use crate::meta::{meta_analyze, MetaInput};
use crate::model::{
    validate_target_coverage, validate_trial, CoverageFlag, CovariateProfile, StudyCateEstimate,
    TrialDataset,
};
use crate::report::{coverage_boxplot_svg, CompareGroup};
use crate::rng::{derive_seed, Purpose};
use crate::sim::{run_experiment, stage1_study, ExperimentConfig, ExperimentRun, Stage1Method};

/// Two-sided 95% normal quantile used for study confidence intervals.
pub const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput {
    /// Ordered by profile (input order), then study id.
    pub aggregates: Vec<StudyCateEstimate<f64>>,
    pub flags: Vec<CoverageFlag>,
}

/// Stage 1 for every study at every profile. Each study's learner is seeded
/// from `(seed, study_id)`.
pub fn estimate(
    trials: &[TrialDataset<f64>],
    profiles: &[CovariateProfile<f64>],
    method: &Stage1Method,
    seed: u64,
) -> Result<EstimateOutput> {
    if profiles.is_empty() {
        return Err(Error::Input("no target profiles".into()));
    }
    for trial in trials {
        let report = validate_trial(trial);
        if !report.is_clean() {
            let reasons: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidTrial {
                study_id: trial.study_id(),
                reason: reasons.join("; "),
            });
        }
    }
    let flags = validate_target_coverage(profiles, trials)?;
    let per_study: Vec<Vec<StudyCateEstimate<f64>>> = trials
        .par_iter()
        .map(|trial| {
            let seed = derive_seed(seed, u64::from(trial.study_id()), Purpose::Learner);
            stage1_study(method, trial, profiles, seed, None)?
                .into_iter()
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let aggregates = (0..profiles.len())
        .flat_map(|j| per_study.iter().map(move |study| study[j].clone()))
        .collect();
    Ok(EstimateOutput { aggregates, flags })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    /// Ordered by profile id.
    pub rows: Vec<PredictionRow>,
    pub warnings: Vec<String>,
}

/// Stage 2 per profile. Two studies give a pooled estimate without an
/// interval and a warning; fewer is an error.
pub fn predict(aggregates: &[StudyCateEstimate<f64>], alpha: f64) -> Result<PredictOutput> {
    let mut by_profile: BTreeMap<u32, Vec<StudyCateEstimate<f64>>> = BTreeMap::new();
    for e in aggregates {
        let group = by_profile.entry(e.profile_id).or_default();
        if group.iter().any(|g| g.study_id == e.study_id) {
            return Err(Error::Input(format!(
                "profile {} has more than one row for study {}",
                e.profile_id, e.study_id
            )));
        }
        group.push(e.clone());
    }
    if by_profile.is_empty() {
        return Err(Error::Input("no aggregate rows".into()));
    }
    let groups: Vec<(u32, Vec<StudyCateEstimate<f64>>)> = by_profile.into_iter().collect();
    let rows: Vec<PredictionRow> = groups
        .into_par_iter()
        .map(|(profile_id, estimates)| {
            let input = MetaInput::new(profile_id, estimates)?;
            let (pooled, pi) = meta_analyze(&input, alpha)?;
            Ok(PredictionRow {
                profile_id,
                tau_pooled: pooled.tau_pooled,
                theta2: pooled.theta2,
                interval: pi.as_ref().map(|pi| (pi.lower, pi.upper, pi.df)),
                flag: pi.map_or(SignFlag::NoInterval, |pi| SignFlag::of(pi.lower, pi.upper)),
            })
        })
        .collect::<Result<_>>()?;
    let warnings = rows
        .iter()
        .filter(|r| r.interval.is_none())
        .map(|r| format!("profile {}: only two studies, no prediction interval", r.profile_id))
        .collect();
    Ok(PredictOutput { rows, warnings })
}

/// Study confidence intervals and the target interval for each selected profile.
pub fn compare_groups(
    aggregates: &[StudyCateEstimate<f64>],
    predictions: &[PredictionRow],
    profile_ids: &[u32],
) -> Result<Vec<CompareGroup>> {
    profile_ids
        .iter()
        .map(|&id| {
            let unknown = |what: &str| Error::Profile {
                profile_id: id,
                reason: format!("not found in {what}"),
            };
            let pred = predictions
                .iter()
                .find(|p| p.profile_id == id)
                .ok_or_else(|| unknown("predictions"))?;
            let (lo, hi, _) = pred.interval.ok_or_else(|| Error::Profile {
                profile_id: id,
                reason: "has no prediction interval".into(),
            })?;
            let mut studies: Vec<(u32, (f64, f64, f64))> = aggregates
                .iter()
                .filter(|a| a.profile_id == id)
                .map(|a| {
                    let h = Z_975 * a.se2.sqrt();
                    (a.study_id, (a.tau_hat, a.tau_hat - h, a.tau_hat + h))
                })
                .collect();
            if studies.is_empty() {
                return Err(unknown("aggregates"));
            }
            studies.sort_by_key(|s| s.0);
            Ok(CompareGroup {
                profile_id: id,
                studies,
                target: (pred.tau_pooled, lo, hi),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub runs: Vec<ExperimentRun>,
    pub metrics_csv: String,
    pub coverage_svg: String,
}

fn scenario_label(cfg: &ExperimentConfig) -> String {
    let level = match cfg.sim.heterogeneity_level {
        0 => "custom".to_string(),
        l => format!("L{l}"),
    };
    format!("{}/{level}/K{}", cfg.sim.cate_setting, cfg.sim.k_studies)
}

/// Every configured method on the same simulated trials.
pub fn simulate(cfg: &ExperimentConfig, digest: &str) -> Result<SimulateOutput> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let runs = cfg
        .methods
        .iter()
        .map(|m| run_experiment(&cfg.sim, m, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<_> = runs.iter().flat_map(|r| r.metrics.rows.iter().cloned()).collect();
    let scenario = scenario_label(cfg);
    let groups: Vec<(String, Vec<f64>)> = cfg
        .methods
        .iter()
        .zip(&runs)
        .map(|(m, r)| {
            (
                format!("{} {scenario}", m.label()),
                r.metrics.rows.iter().map(|p| p.coverage).collect(),
            )
        })
        .collect();
    Ok(SimulateOutput {
        metrics_csv: write_metrics(&rows),
        coverage_svg: coverage_boxplot_svg(&groups, digest),
        runs,
    })
}

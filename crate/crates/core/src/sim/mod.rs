//! Simulation study: synthetic multi-trial data, replicated two-stage runs and
//! coverage metrics.

pub mod calibration;
pub mod config;
pub mod experiment;
pub mod generate;

pub use calibration::{hierarchy_calibration, CalibrationConfig, CalibrationResult};
pub use config::{
    parse_experiment, BartInterval, CateSetting, CovariateMode, EffectDistribution, EffectScales,
    ExperimentConfig, SimConfig, Stage1Method,
};
pub use experiment::{
    frozen_target, gen_replication, run_experiment, stage1_study, ExperimentRun, MetricsTable, ProfileMetrics,
    TrueEffectRecord,
};
pub use generate::{StudyEffects, COVARIATE_NAMES};

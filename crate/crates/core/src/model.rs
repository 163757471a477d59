//! Shared domain types and the checks applied to trial data before any
//! estimation takes place.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest per-arm row count accepted as evidence of positivity.
pub const MIN_ARM_ROWS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow<T> {
    pub y: T,
    pub treated: bool,
    pub x: Vec<T>,
}

impl<T> TrialRow<T> {
    pub fn new(y: T, treated: bool, x: Vec<T>) -> Self {
        Self { y, treated, x }
    }
}

/// Individual-level rows of one randomized trial.
///
/// Construction does not reject bad data: run [`validate_trial`] and decide
/// what to do with the report. Learners refuse datasets whose report is not
/// clean.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset<T> {
    study_id: u32,
    covariate_names: Vec<String>,
    rows: Vec<TrialRow<T>>,
}

impl<T: Scalar> TrialDataset<T> {
    pub fn new(study_id: u32, covariate_names: Vec<String>, rows: Vec<TrialRow<T>>) -> Self {
        Self {
            study_id,
            covariate_names,
            rows,
        }
    }

    pub fn study_id(&self) -> u32 {
        self.study_id
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates `p`.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn rows(&self) -> &[TrialRow<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.rows.iter().filter(|r| r.treated).count()
    }

    pub fn n_control(&self) -> usize {
        self.rows.len() - self.n_treated()
    }

    pub fn outcomes(&self) -> impl Iterator<Item = T> + '_ {
        self.rows.iter().map(|r| r.y)
    }

    /// Copy with every outcome passed through `f`.
    pub fn map_outcomes(&self, f: impl Fn(T) -> T) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| TrialRow::new(f(r.y), r.treated, r.x.clone()))
            .collect();
        Self::new(self.study_id, self.covariate_names.clone(), rows)
    }

    /// Copy with treatment labels flipped (`a -> 1 - a`).
    pub fn with_swapped_treatment(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| TrialRow::new(r.y, !r.treated, r.x.clone()))
            .collect();
        Self::new(self.study_id, self.covariate_names.clone(), rows)
    }

    /// Sample variance of the outcome column.
    pub fn outcome_variance(&self) -> T {
        let ys: Vec<T> = self.outcomes().collect();
        crate::scalar::sample_variance(&ys)
    }

    pub(crate) fn ensure_valid(&self) -> Result<()> {
        validate_trial(self).into_result()
    }
}

/// A covariate vector `X*` for which study-level CATEs are predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateProfile<T> {
    pub profile_id: u32,
    pub x: Vec<T>,
}

impl<T: Scalar> CovariateProfile<T> {
    pub fn new(profile_id: u32, x: Vec<T>) -> Self {
        Self { profile_id, x }
    }

    pub(crate) fn check_dim(&self, p: usize) -> Result<()> {
        if self.x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: self.x.len(),
            });
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Profile {
                profile_id: self.profile_id,
                reason: "non-finite covariate value".into(),
            });
        }
        Ok(())
    }
}

/// Stage-1 output for one (study, profile) pair: `tau_hat` and its squared
/// standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyCateEstimate<T> {
    pub study_id: u32,
    pub profile_id: u32,
    pub tau_hat: T,
    pub se2: T,
}

impl<T: Scalar> StudyCateEstimate<T> {
    pub fn new(study_id: u32, profile_id: u32, tau_hat: T, se2: T) -> Result<Self> {
        if !tau_hat.is_finite() {
            return Err(Error::Profile {
                profile_id,
                reason: format!("study {study_id}: non-finite tau_hat"),
            });
        }
        if !se2.is_finite() || se2 < T::zero() {
            return Err(Error::Profile {
                profile_id,
                reason: format!("study {study_id}: se2 must be finite and >= 0, got {se2}"),
            });
        }
        Ok(Self {
            study_id,
            profile_id,
            tau_hat,
            se2,
        })
    }
}

/// Random-effects summary of one profile across studies.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCate<T> {
    pub profile_id: u32,
    pub tau_pooled: T,
    pub var_pooled: T,
    pub theta2: T,
    pub k_studies: usize,
    /// Raw inverse-variance weights `1 / (se2_s + theta2)`, in input order.
    pub weights: Vec<T>,
}

impl<T: Scalar> PooledCate<T> {
    /// Weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> Vec<T> {
        if self.weights.iter().any(|w| w.is_infinite()) {
            let n_inf = self.weights.iter().filter(|w| w.is_infinite()).count();
            let share = T::one() / T::from_usize_lossy(n_inf);
            return self
                .weights
                .iter()
                .map(|w| if w.is_infinite() { share } else { T::zero() })
                .collect();
        }
        let total: T = self.weights.iter().copied().sum();
        self.weights.iter().map(|&w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionInterval<T> {
    pub profile_id: u32,
    pub center: T,
    pub lower: T,
    pub upper: T,
    pub level: T,
    pub df: usize,
}

impl<T: Scalar> PredictionInterval<T> {
    pub fn width(&self) -> T {
        self.upper - self.lower
    }

    pub fn contains(&self, value: T) -> bool {
        self.lower <= value && value <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ArmTooSmall { arm: u8, count: usize },
    NonFinite { row: usize, field: String },
    DimensionMismatch { row: usize, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ArmTooSmall { arm, count } => {
                write!(f, "arm a={arm} has <{MIN_ARM_ROWS} rows (found {count})")
            }
            Violation::NonFinite { row, field } => {
                write!(f, "row {row}: non-finite value in `{field}`")
            }
            Violation::DimensionMismatch {
                row,
                expected,
                found,
            } => write!(f, "row {row}: expected {expected} covariates, found {found}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport<T> {
    pub study_id: u32,
    pub violations: Vec<Violation>,
    pub n_treated: usize,
    pub n_control: usize,
    /// Empirical propensity: fraction of rows in the treated arm.
    pub propensity: T,
}

impl<T> ValidationReport<T> {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.violations.is_empty() {
            return Ok(());
        }
        let reason = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidTrial {
            study_id: self.study_id,
            reason,
        })
    }
}

/// Checks arm sizes, finiteness and covariate dimensions of one trial.
pub fn validate_trial<T: Scalar>(dataset: &TrialDataset<T>) -> ValidationReport<T> {
    let p = dataset.n_covariates();
    let mut violations = Vec::new();
    let n_treated = dataset.n_treated();
    let n_control = dataset.n_control();
    if n_control < MIN_ARM_ROWS {
        violations.push(Violation::ArmTooSmall {
            arm: 0,
            count: n_control,
        });
    }
    if n_treated < MIN_ARM_ROWS {
        violations.push(Violation::ArmTooSmall {
            arm: 1,
            count: n_treated,
        });
    }
    for (i, row) in dataset.rows().iter().enumerate() {
        if !row.y.is_finite() {
            violations.push(Violation::NonFinite {
                row: i,
                field: "y".into(),
            });
        }
        if row.x.len() != p {
            violations.push(Violation::DimensionMismatch {
                row: i,
                expected: p,
                found: row.x.len(),
            });
            continue;
        }
        for (j, v) in row.x.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFinite {
                    row: i,
                    field: dataset.covariate_names()[j].clone(),
                });
            }
        }
    }
    let propensity = if dataset.is_empty() {
        T::zero()
    } else {
        T::from_usize_lossy(n_treated) / T::from_usize_lossy(dataset.len())
    };
    ValidationReport {
        study_id: dataset.study_id(),
        violations,
        n_treated,
        n_control,
        propensity,
    }
}

/// Profile lying outside the pooled observed range of one or more covariates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageFlag {
    pub profile_id: u32,
    /// Indices of the covariates that fall outside the pooled range.
    pub covariates: Vec<usize>,
    pub names: Vec<String>,
}

impl CoverageFlag {
    pub fn is_flagged(&self) -> bool {
        !self.covariates.is_empty()
    }
}

/// Flags profiles falling outside the closed `[min, max]` range observed
/// across all trials, per covariate. Returns one entry per profile, in order.
pub fn validate_target_coverage<T: Scalar>(
    profiles: &[CovariateProfile<T>],
    trials: &[TrialDataset<T>],
) -> Result<Vec<CoverageFlag>> {
    let Some(first) = trials.first() else {
        return Err(Error::Input("no trial datasets supplied".into()));
    };
    let p = first.n_covariates();
    let names = first.covariate_names();
    let mut lo = vec![T::infinity(); p];
    let mut hi = vec![T::neg_infinity(); p];
    for trial in trials {
        if trial.n_covariates() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: trial.n_covariates(),
            });
        }
        for row in trial.rows() {
            if row.x.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: row.x.len(),
                });
            }
            for (j, &v) in row.x.iter().enumerate() {
                if v.is_finite() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
    }
    profiles
        .iter()
        .map(|profile| {
            if profile.x.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: profile.x.len(),
                });
            }
            let covariates: Vec<usize> = (0..p)
                .filter(|&j| !(lo[j] <= profile.x[j] && profile.x[j] <= hi[j]))
                .collect();
            Ok(CoverageFlag {
                profile_id: profile.profile_id,
                names: covariates.iter().map(|&j| names[j].clone()).collect(),
                covariates,
            })
        })
        .collect()
}

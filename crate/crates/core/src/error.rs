use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} covariates, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid trial data for study {study_id}: {reason}")]
    InvalidTrial { study_id: u32, reason: String },

    #[error("singular design: column `{column}` is linearly dependent on earlier columns")]
    SingularDesign { column: String },

    #[error("insufficient data: {rows} rows for {coefficients} coefficients")]
    InsufficientData { rows: usize, coefficients: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("profile {profile_id}: {reason}")]
    Profile { profile_id: u32, reason: String },

    #[error("need at least {required} studies, got {found}")]
    InsufficientStudies { required: usize, found: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("input error: {0}")]
    Input(String),
}

//! Two-stage meta-analysis of conditional average treatment effects (CATEs).
//!
//! Stage 1 estimates, within each randomized trial, the CATE and its variance
//! at a set of covariate profiles (interaction least squares, a causal forest
//! or a BART S-learner). Stage 2 pools those per-study estimates with a
//! random-effects model and forms prediction intervals for the CATE in a new
//! setting. The [`sim`] module reproduces the coverage experiments.
//!
//! Estimators are generic over the floating-point type; the aliases below fix
//! it to `f64`.

pub mod bart;
pub mod error;
pub mod forest;
pub mod io;
pub mod linear;
pub(crate) mod linalg;
pub mod meta;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod special;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TrialDatasetF64 = model::TrialDataset<f64>;
pub type CovariateProfileF64 = model::CovariateProfile<f64>;
pub type StudyCateEstimateF64 = model::StudyCateEstimate<f64>;
pub type PooledCateF64 = model::PooledCate<f64>;
pub type PredictionIntervalF64 = model::PredictionInterval<f64>;
pub type MetaInputF64 = meta::MetaInput<f64>;
pub type LinearCateFitF64 = linear::LinearCateFit<f64>;
pub type CausalForestModelF64 = forest::CausalForestModel<f64>;
pub type BartPosteriorF64 = bart::BartPosterior<f64>;

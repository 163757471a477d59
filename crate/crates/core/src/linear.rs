//! Per-study CATE estimation by least squares with treatment-by-moderator
//! interactions.
//!
//! The design has columns `1, x_1..x_p, a, a*x_m (m in moderators)`. The CATE
//! at a profile is the contrast `b_a + sum_m b_{a:m} x*_m`, and its variance is
//! the matching quadratic form in the coefficient covariance.

use crate::error::{Error, Result};
use crate::linalg::{gram_inverse_from_r, qr_least_squares, QrFailure};
use crate::model::{CovariateProfile, StudyCateEstimate, TrialDataset};
use crate::scalar::Scalar;

/// Which covariates interact with treatment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Moderators {
    #[default]
    All,
    /// Zero-based covariate indices.
    Indices(Vec<usize>),
}

impl Moderators {
    /// Parses `all` or a comma list of covariate names or zero-based indices.
    pub fn parse(text: &str, covariate_names: &[String]) -> Result<Self> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("all") {
            return Ok(Moderators::All);
        }
        let mut indices = Vec::new();
        for token in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let idx = match covariate_names.iter().position(|n| n == token) {
                Some(i) => i,
                None => token.parse::<usize>().map_err(|_| {
                    Error::Config(format!("unknown moderator `{token}`"))
                })?,
            };
            if idx >= covariate_names.len() {
                return Err(Error::Config(format!(
                    "moderator index {idx} out of range for {} covariates",
                    covariate_names.len()
                )));
            }
            if !indices.contains(&idx) {
                indices.push(idx);
            }
        }
        Ok(Moderators::Indices(indices))
    }

    fn resolve(&self, p: usize) -> Result<Vec<usize>> {
        match self {
            Moderators::All => Ok((0..p).collect()),
            Moderators::Indices(idx) => {
                if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
                    return Err(Error::Config(format!(
                        "moderator index {bad} out of range for {p} covariates"
                    )));
                }
                Ok(idx.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCateFit<T> {
    pub study_id: u32,
    /// Intercept, main covariates, treatment, interactions.
    pub coefficients: Vec<T>,
    /// `sigma2 * (X^T X)^{-1}`, row-major.
    pub covariance: Vec<Vec<T>>,
    pub moderator_indices: Vec<usize>,
    pub column_names: Vec<String>,
    pub n_covariates: usize,
    pub residual_variance: T,
    pub residual_df: usize,
}

impl<T: Scalar> LinearCateFit<T> {
    pub fn treatment_index(&self) -> usize {
        1 + self.n_covariates
    }

    pub fn treatment_coefficient(&self) -> T {
        self.coefficients[self.treatment_index()]
    }

    pub fn interaction_coefficients(&self) -> &[T] {
        &self.coefficients[self.treatment_index() + 1..]
    }

    fn contrast(&self, x: &[T]) -> Vec<T> {
        let mut c = vec![T::zero(); self.coefficients.len()];
        let t = self.treatment_index();
        c[t] = T::one();
        for (k, &m) in self.moderator_indices.iter().enumerate() {
            c[t + 1 + k] = x[m];
        }
        c
    }
}

fn design_columns<T: Scalar>(dataset: &TrialDataset<T>, moderators: &[usize]) -> (Vec<Vec<T>>, Vec<String>) {
    let rows = dataset.rows();
    let p = dataset.n_covariates();
    let names = dataset.covariate_names();
    let mut columns = Vec::with_capacity(2 + p + moderators.len());
    let mut labels = Vec::with_capacity(columns.capacity());
    columns.push(vec![T::one(); rows.len()]);
    labels.push("(intercept)".to_string());
    for j in 0..p {
        columns.push(rows.iter().map(|r| r.x[j]).collect());
        labels.push(names[j].clone());
    }
    let a: Vec<T> = rows
        .iter()
        .map(|r| if r.treated { T::one() } else { T::zero() })
        .collect();
    for &m in moderators {
        labels.push(format!("a:{}", names[m]));
    }
    let interactions: Vec<Vec<T>> = moderators
        .iter()
        .map(|&m| rows.iter().zip(&a).map(|(r, &ai)| ai * r.x[m]).collect())
        .collect();
    columns.push(a);
    labels.insert(1 + p, "a".to_string());
    columns.extend(interactions);
    (columns, labels)
}

/// Fits the interaction model to one study.
pub fn fit_interaction_ols<T: Scalar>(
    dataset: &TrialDataset<T>,
    moderators: &Moderators,
) -> Result<LinearCateFit<T>> {
    dataset.ensure_valid()?;
    let p = dataset.n_covariates();
    let moderator_indices = moderators.resolve(p)?;
    let q = 2 + p + moderator_indices.len();
    let n = dataset.len();
    if n <= q {
        return Err(Error::InsufficientData {
            rows: n,
            coefficients: q,
        });
    }
    let (columns, column_names) = design_columns(dataset, &moderator_indices);
    let y: Vec<T> = dataset.outcomes().collect();
    let ls = qr_least_squares(&columns, &y).map_err(|QrFailure::RankDeficient(j)| {
        Error::SingularDesign {
            column: column_names[j].clone(),
        }
    })?;
    let residual_df = n - q;
    let residual_variance = ls.rss / T::from_usize_lossy(residual_df);
    let covariance = gram_inverse_from_r(&ls.r)
        .into_iter()
        .map(|row| row.into_iter().map(|v| v * residual_variance).collect())
        .collect();
    Ok(LinearCateFit {
        study_id: dataset.study_id(),
        coefficients: ls.coefficients,
        covariance,
        moderator_indices,
        column_names,
        n_covariates: p,
        residual_variance,
        residual_df,
    })
}

/// CATE and its squared standard error at one profile.
pub fn linear_cate<T: Scalar>(
    fit: &LinearCateFit<T>,
    profile: &CovariateProfile<T>,
) -> Result<StudyCateEstimate<T>> {
    profile.check_dim(fit.n_covariates)?;
    let c = fit.contrast(&profile.x);
    let tau_hat: T = c.iter().zip(&fit.coefficients).map(|(&ci, &bi)| ci * bi).sum();
    let mut se2 = T::zero();
    for (i, &ci) in c.iter().enumerate() {
        if ci == T::zero() {
            continue;
        }
        for (j, &cj) in c.iter().enumerate() {
            se2 += ci * fit.covariance[i][j] * cj;
        }
    }
    // PSD quadratic form; negative values are rounding noise
    StudyCateEstimate::new(fit.study_id, profile.profile_id, tau_hat, se2.max(T::zero()))
}

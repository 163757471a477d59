//! Bayesian additive regression trees used as an S-learner: one sum-of-trees
//! model over `(x, a)`, sampled by backfitting MCMC, then evaluated at every
//! registered profile with `a = 1` and `a = 0`.
//!
//! The outcome is mapped to `[-0.5, 0.5]` before sampling; recorded draws are
//! mapped back to outcome units. The sampler works in `f64` regardless of the
//! caller's scalar type.

mod tree;

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::linalg::qr_least_squares;
use crate::model::{CovariateProfile, StudyCateEstimate, TrialDataset};
use crate::rng::{stream, Purpose};
use crate::scalar::{mean, sample_variance, Scalar};
use crate::special::chi_square_quantile;
use tree::{Design, Tree, TreePrior};

#[derive(Debug, Clone, PartialEq)]
pub struct BartParams {
    pub n_trees: usize,
    pub n_burn: usize,
    pub n_draws: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Leaf prior scale: the sum of trees has prior sd `0.5 / k` on the scaled outcome.
    pub k: f64,
    pub nu: f64,
    /// Prior probability that the error sd is below the least-squares estimate.
    pub q: f64,
    pub seed: u64,
}

impl Default for BartParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            n_burn: 500,
            n_draws: 1000,
            alpha: 0.95,
            beta: 2.0,
            k: 2.0,
            nu: 3.0,
            q: 0.90,
            seed: 0,
        }
    }
}

impl BartParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_trees == 0 || self.n_draws == 0 {
            return bad("n_trees and n_draws must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must be in (0, 1)");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.k > 0.0 && self.nu > 0.0) {
            return bad("k and nu must be positive");
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad("q must be in (0, 1)");
        }
        Ok(())
    }
}

/// Affine map between outcome units and the sampler's `[-0.5, 0.5]` scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScale {
    pub min: f64,
    pub range: f64,
}

impl OutcomeScale {
    fn of(y: &[f64]) -> Self {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if max > min { max - min } else { 1.0 };
        Self { min, range }
    }

    fn to_scaled(self, y: f64) -> f64 {
        (y - self.min) / self.range - 0.5
    }

    fn to_outcome(self, s: f64) -> f64 {
        (s + 0.5) * self.range + self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BartPosterior<T> {
    study_id: u32,
    profiles: Vec<CovariateProfile<T>>,
    /// `draws[d][2 * j + a]` is draw `d` of `f(x_j, a)`.
    draws: Vec<Vec<T>>,
    scale: OutcomeScale,
}

impl<T: Scalar> BartPosterior<T> {
    /// Builds a posterior from precomputed draws laid out as in [`Self::draws`].
    pub fn from_draws(
        study_id: u32,
        profiles: Vec<CovariateProfile<T>>,
        draws: Vec<Vec<T>>,
        scale: OutcomeScale,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Config("posterior needs at least one draw".into()));
        }
        if let Some(bad) = draws.iter().find(|d| d.len() != 2 * profiles.len()) {
            return Err(Error::DimensionMismatch {
                expected: 2 * profiles.len(),
                found: bad.len(),
            });
        }
        Ok(Self {
            study_id,
            profiles,
            draws,
            scale,
        })
    }

    pub fn draws(&self) -> &[Vec<T>] {
        &self.draws
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn scale(&self) -> OutcomeScale {
        self.scale
    }

    pub fn profiles(&self) -> &[CovariateProfile<T>] {
        &self.profiles
    }

    /// Draws of `f(x, 1)` and `f(x, 0)` for a registered profile.
    pub fn arm_draws(&self, profile: &CovariateProfile<T>) -> Result<(Vec<T>, Vec<T>)> {
        let j = self
            .profiles
            .iter()
            .position(|p| p.profile_id == profile.profile_id && p.x == profile.x)
            .ok_or_else(|| Error::Profile {
                profile_id: profile.profile_id,
                reason: "profile was not registered when the model was fitted".into(),
            })?;
        let treated = self.draws.iter().map(|d| d[2 * j + 1]).collect();
        let control = self.draws.iter().map(|d| d[2 * j]).collect();
        Ok((treated, control))
    }
}

/// Residual sd of a least-squares fit of the scaled outcome, or the sample sd
/// when the fit is not identified.
fn prior_sigma(design: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let p = design.first().map_or(0, Vec::len);
    if n > p + 1 {
        let mut cols = vec![vec![1.0; n]];
        cols.extend((0..p).map(|j| design.iter().map(|r| r[j]).collect::<Vec<_>>()));
        if let Ok(ls) = qr_least_squares(&cols, y) {
            let s2 = ls.rss / (n - p - 1) as f64;
            if s2 > 0.0 {
                return s2.sqrt();
            }
        }
    }
    sample_variance(y).sqrt().max(1e-3)
}

/// Fits the S-learner and records posterior draws at every profile and arm.
pub fn fit_bart_slearner<T: Scalar>(
    dataset: &TrialDataset<T>,
    profiles: &[CovariateProfile<T>],
    params: &BartParams,
) -> Result<BartPosterior<T>> {
    dataset.ensure_valid()?;
    params.validate()?;
    if profiles.is_empty() {
        return Err(Error::Config("at least one profile is required".into()));
    }
    let p = dataset.n_covariates();
    for prof in profiles {
        prof.check_dim(p)?;
    }

    let rows = dataset.rows();
    let y: Vec<f64> = rows.iter().map(|r| r.y.to_f64_lossy()).collect();
    let scale = OutcomeScale::of(&y);
    let ys: Vec<f64> = y.iter().map(|&v| scale.to_scaled(v)).collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v: Vec<f64> = r.x.iter().map(|c| c.to_f64_lossy()).collect();
            v.push(if r.treated { 1.0 } else { 0.0 });
            v
        })
        .collect();
    let eval: Vec<Vec<f64>> = profiles
        .iter()
        .flat_map(|prof| {
            let base: Vec<f64> = prof.x.iter().map(|c| c.to_f64_lossy()).collect();
            [0.0, 1.0].map(|a| {
                let mut v = base.clone();
                v.push(a);
                v
            })
        })
        .collect();

    let n = ys.len();
    let m = params.n_trees;
    let design = Design { x: &x, p: p + 1 };
    let mu_sd = 0.5 / (params.k * (m as f64).sqrt());
    let prior = TreePrior {
        alpha: params.alpha,
        beta: params.beta,
        mu_var: mu_sd * mu_sd,
    };
    let sigma_hat = prior_sigma(&x, &ys);
    let lambda = sigma_hat * sigma_hat * chi_square_quantile(params.nu, 1.0 - params.q) / params.nu;

    let mut rng = stream(params.seed, 0, Purpose::Mcmc);
    let mut trees: Vec<Tree> = (0..m).map(|_| Tree::new(n)).collect();
    let mut tree_fit = vec![vec![0.0; n]; m];
    let mut total = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut sigma2 = sigma_hat * sigma_hat;
    let mut draws = Vec::with_capacity(params.n_draws);

    for iter in 0..params.n_burn + params.n_draws {
        for (t, tree) in trees.iter_mut().enumerate() {
            for i in 0..n {
                resid[i] = ys[i] - (total[i] - tree_fit[t][i]);
            }
            tree.mh_step(&design, &resid, sigma2, &prior, &mut rng);
            tree.draw_leaves(&resid, sigma2, prior.mu_var, &mut rng);
            let old = std::mem::take(&mut tree_fit[t]);
            let mut new = old.clone();
            tree.fitted(&mut new);
            for i in 0..n {
                total[i] += new[i] - old[i];
            }
            tree_fit[t] = new;
        }
        let sse: f64 = ys.iter().zip(&total).map(|(a, b)| (a - b) * (a - b)).sum();
        let shape = 0.5 * (params.nu + n as f64);
        let rate = 0.5 * (params.nu * lambda + sse);
        let g: f64 = Gamma::new(shape, 1.0)
            .expect("positive shape")
            .sample(&mut rng);
        sigma2 = rate / g;

        if iter >= params.n_burn {
            draws.push(
                eval.iter()
                    .map(|e| {
                        let s: f64 = trees.iter().map(|t| t.predict(e)).sum();
                        T::lit(scale.to_outcome(s))
                    })
                    .collect(),
            );
        }
    }

    BartPosterior::from_draws(dataset.study_id(), profiles.to_vec(), draws, scale)
}

/// Option 1: arms treated as independent, `se2 = Var(f(x,1)) + Var(f(x,0))`.
pub fn bart_cate_normal<T: Scalar>(
    posterior: &BartPosterior<T>,
    profile: &CovariateProfile<T>,
) -> Result<StudyCateEstimate<T>> {
    let (f1, f0) = posterior.arm_draws(profile)?;
    let tau_hat = mean(&f1) - mean(&f0);
    let se2 = sample_variance(&f1) + sample_variance(&f0);
    StudyCateEstimate::new(posterior.study_id, profile.profile_id, tau_hat, se2)
}

/// Linear-interpolation quantile of a sorted sample (`h = (n - 1) p`).
pub fn interpolated_quantile<T: Scalar>(sorted: &[T], prob: T) -> T {
    let h = T::from_usize_lossy(sorted.len() - 1) * prob;
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (h - lo) * (sorted[j] - sorted[i])
}

/// Option 2: `(tau_hat, lower, upper)` from the empirical quantiles of the
/// per-draw differences.
pub fn bart_cate_quantile<T: Scalar>(
    posterior: &BartPosterior<T>,
    profile: &CovariateProfile<T>,
    level: T,
) -> Result<(T, T, T)> {
    if !(level > T::zero() && level < T::one()) {
        return Err(Error::Domain(format!("level must be in (0, 1), got {level}")));
    }
    let (f1, f0) = posterior.arm_draws(profile)?;
    let mut d: Vec<T> = f1.iter().zip(&f0).map(|(&a, &b)| a - b).collect();
    let tau_hat = mean(&d);
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
    let tail = (T::one() - level) * T::lit(0.5);
    Ok((
        tau_hat,
        interpolated_quantile(&d, tail),
        interpolated_quantile(&d, T::one() - tail),
    ))
}

/// Option 2 as a Stage-2 input: the credible interval width is read as a
/// normal interval, so `se2 = ((upper - lower) / (2 z))^2` with `z` the
/// two-sided normal quantile at `level`.
pub fn bart_cate_quantile_estimate<T: Scalar>(
    posterior: &BartPosterior<T>,
    profile: &CovariateProfile<T>,
    level: T,
) -> Result<StudyCateEstimate<T>> {
    let (tau_hat, lower, upper) = bart_cate_quantile(posterior, profile, level)?;
    // z^2 for a two-sided level is the chi-square(1) quantile at that level
    let z2 = chi_square_quantile(T::one(), level);
    let half = (upper - lower) * T::lit(0.5);
    StudyCateEstimate::new(posterior.study_id, profile.profile_id, tau_hat, half * half / z2)
}

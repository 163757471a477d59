//! Coverage check of the prediction interval when the data follow the
//! random-effects hierarchy exactly: `tau_s ~ N(mu, theta2)`,
//! `tau_hat_s ~ N(tau_s, v_s)` with known `v_s`, and a fresh `tau_new` from
//! the same distribution each replication.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::meta::{meta_analyze, MetaInput};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub k_studies: usize,
    pub mu: f64,
    pub theta2: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub n_replications: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k_studies: 10,
            mu: 0.0,
            theta2: 1.0,
            v_min: 0.1,
            v_max: 1.0,
            n_replications: 5000,
            alpha: 0.05,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub coverage: f64,
    pub mean_length: f64,
    pub n_effective: usize,
    pub n_failed: usize,
}

pub fn hierarchy_calibration(cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    if cfg.k_studies < 3 || cfg.n_replications == 0 {
        return Err(Error::Config("need k_studies >= 3 and n_replications > 0".into()));
    }
    if !(cfg.v_min >= 0.0 && cfg.v_max >= cfg.v_min && cfg.theta2 >= 0.0) {
        return Err(Error::Config("need 0 <= v_min <= v_max and theta2 >= 0".into()));
    }
    let theta = cfg.theta2.sqrt();
    let outcomes: Vec<Option<(bool, f64)>> = (0..cfg.n_replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(cfg.seed, rep as u64, Purpose::Calibration);
            let mut tau_hat = Vec::with_capacity(cfg.k_studies);
            let mut v = Vec::with_capacity(cfg.k_studies);
            for _ in 0..cfg.k_studies {
                let vs = rng.random_range(cfg.v_min..=cfg.v_max);
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                tau_hat.push(cfg.mu + theta * z1 + vs.sqrt() * z2);
                v.push(vs);
            }
            let z: f64 = rng.sample(StandardNormal);
            let tau_new = cfg.mu + theta * z;
            let input = MetaInput::from_slices(1, &tau_hat, &v).ok()?;
            let (_, pi) = meta_analyze(&input, cfg.alpha).ok()?;
            let pi = pi?;
            Some((pi.contains(tau_new), pi.width()))
        })
        .collect();
    let ok: Vec<(bool, f64)> = outcomes.iter().flatten().copied().collect();
    let n = ok.len();
    Ok(CalibrationResult {
        coverage: ok.iter().filter(|o| o.0).count() as f64 / n as f64,
        mean_length: ok.iter().map(|o| o.1).sum::<f64>() / n as f64,
        n_effective: n,
        n_failed: cfg.n_replications - n,
    })
}

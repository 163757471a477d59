//! Simulation settings and the flat `key = value` experiment file.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::bart::BartParams;
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::linear::Moderators;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CateSetting {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateMode {
    Variable,
    Same,
    AgeOnlyVariable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectDistribution {
    Normal,
    Uniform,
}

/// Standard deviations of the study-level intercept, effect and interaction
/// shifts `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectScales {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_c: f64,
}

impl EffectScales {
    pub fn level(level: u8) -> Result<Self> {
        let (sigma_a, sigma_b, sigma_c) = match level {
            1 => (1.0, 0.25, 0.25),
            2 => (1.0, 0.5, 0.25),
            3 => (1.0, 1.0, 0.5),
            other => {
                return Err(Error::Config(format!(
                    "heterogeneity_level must be 1, 2 or 3, got {other}"
                )))
            }
        };
        Ok(Self { sigma_a, sigma_b, sigma_c })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub k_studies: usize,
    pub n_per_study: usize,
    pub cate_setting: CateSetting,
    /// 1 to 3, or 0 when `scales` were set directly.
    pub heterogeneity_level: u8,
    pub scales: EffectScales,
    pub covariate_mode: CovariateMode,
    pub effect_distribution: EffectDistribution,
    pub n_replications: usize,
    pub noise_sd: f64,
    pub master_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k_studies: 10,
            n_per_study: 500,
            cate_setting: CateSetting::Linear,
            heterogeneity_level: 1,
            scales: EffectScales::level(1).expect("level 1 exists"),
            covariate_mode: CovariateMode::Variable,
            effect_distribution: EffectDistribution::Normal,
            n_replications: 500,
            noise_sd: 0.05,
            master_seed: 2024,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_studies < 3 {
            return Err(Error::Config(format!(
                "k_studies must be at least 3 for prediction intervals, got {}",
                self.k_studies
            )));
        }
        if self.k_studies > 1024 {
            return Err(Error::Config("k_studies must be at most 1024".into()));
        }
        if self.n_per_study < 8 || self.n_replications == 0 {
            return Err(Error::Config(
                "n_per_study must be at least 8 and n_replications positive".into(),
            ));
        }
        let s = self.scales;
        if !(s.sigma_a >= 0.0 && s.sigma_b >= 0.0 && s.sigma_c >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::Config("effect scales and noise_sd must be >= 0".into()));
        }
        Ok(())
    }

    /// Same experiment at another heterogeneity level.
    pub fn with_level(&self, level: u8) -> Result<Self> {
        Ok(Self {
            heterogeneity_level: level,
            scales: EffectScales::level(level)?,
            ..self.clone()
        })
    }
}

/// How each study's CATE at each profile is estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage1Method {
    Linear(Moderators),
    Forest(ForestParams),
    Bart { params: BartParams, interval: BartInterval },
    /// True study CATE reported with a fixed variance.
    Oracle { se2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BartInterval {
    Normal,
    Quantile,
}

impl Stage1Method {
    pub fn label(&self) -> &'static str {
        match self {
            Stage1Method::Linear(_) => "linear",
            Stage1Method::Forest(p) if p.honest => "honest_forest",
            Stage1Method::Forest(_) => "adaptive_forest",
            Stage1Method::Bart { .. } => "bart",
            Stage1Method::Oracle { .. } => "oracle",
        }
    }
}

/// A simulation plus the Stage-1 methods to compare on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub methods: Vec<Stage1Method>,
    pub alpha: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            methods: vec![Stage1Method::Linear(Moderators::All)],
            alpha: 0.05,
        }
    }
}

impl fmt::Display for CateSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CateSetting::Linear => "linear",
            CateSetting::Nonlinear => "nonlinear",
        })
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

const KEYS: &[&str] = &[
    "k_studies",
    "n_per_study",
    "cate_setting",
    "heterogeneity_level",
    "covariate_mode",
    "effect_distribution",
    "n_replications",
    "master_seed",
    "noise_sd",
    "sigma_a",
    "sigma_b",
    "sigma_c",
    "methods",
    "alpha",
    "moderators",
    "forest_trees",
    "forest_min_leaf",
    "forest_bag_size",
    "forest_subsample",
    "bart_trees",
    "bart_burn",
    "bart_draws",
    "bart_interval",
    "oracle_se2",
];

/// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys
/// are errors that name the key.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", lineno + 1)));
        }
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` repeated", lineno + 1)));
        }
    }
    let get = |k: &str| kv.get(k).map(String::as_str);

    let mut sim = SimConfig::default();
    if let Some(v) = get("k_studies") {
        sim.k_studies = parse_value("k_studies", v)?;
    }
    if let Some(v) = get("n_per_study") {
        sim.n_per_study = parse_value("n_per_study", v)?;
    }
    if let Some(v) = get("n_replications") {
        sim.n_replications = parse_value("n_replications", v)?;
    }
    if let Some(v) = get("master_seed") {
        sim.master_seed = parse_value("master_seed", v)?;
    }
    if let Some(v) = get("noise_sd") {
        sim.noise_sd = parse_value("noise_sd", v)?;
    }
    if let Some(v) = get("cate_setting") {
        sim.cate_setting = match v {
            "linear" | "1" => CateSetting::Linear,
            "nonlinear" | "2" => CateSetting::Nonlinear,
            _ => return Err(Error::Config(format!("key `cate_setting`: unknown value `{v}`"))),
        };
    }
    if let Some(v) = get("covariate_mode") {
        sim.covariate_mode = match v {
            "variable" => CovariateMode::Variable,
            "same" => CovariateMode::Same,
            "age_only_variable" => CovariateMode::AgeOnlyVariable,
            _ => return Err(Error::Config(format!("key `covariate_mode`: unknown value `{v}`"))),
        };
    }
    if let Some(v) = get("effect_distribution") {
        sim.effect_distribution = match v {
            "normal" => EffectDistribution::Normal,
            "uniform" => EffectDistribution::Uniform,
            _ => {
                return Err(Error::Config(format!(
                    "key `effect_distribution`: unknown value `{v}`"
                )))
            }
        };
    }
    if let Some(v) = get("heterogeneity_level") {
        let level: u8 = parse_value("heterogeneity_level", v)?;
        sim = sim.with_level(level)?;
    }
    let overrides = ["sigma_a", "sigma_b", "sigma_c"];
    if overrides.iter().any(|k| get(k).is_some()) {
        let mut s = sim.scales;
        for (key, slot) in overrides.iter().zip([&mut s.sigma_a, &mut s.sigma_b, &mut s.sigma_c]) {
            if let Some(v) = get(key) {
                *slot = parse_value(key, v)?;
            }
        }
        sim.scales = s;
        sim.heterogeneity_level = 0;
    }
    sim.validate()?;

    let alpha = match get("alpha") {
        Some(v) => parse_value("alpha", v)?,
        None => 0.05,
    };
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("key `alpha`: must be in (0, 1), got {alpha}")));
    }

    let mut forest = ForestParams::default();
    if let Some(v) = get("forest_trees") {
        forest.n_trees = parse_value("forest_trees", v)?;
    }
    if let Some(v) = get("forest_min_leaf") {
        let m: usize = parse_value("forest_min_leaf", v)?;
        forest.min_leaf_treated = m;
        forest.min_leaf_control = m;
    }
    if let Some(v) = get("forest_bag_size") {
        forest.bag_size = parse_value("forest_bag_size", v)?;
    }
    if let Some(v) = get("forest_subsample") {
        forest.subsample_fraction = parse_value("forest_subsample", v)?;
    }
    forest.validate(5)?;

    let mut bart = BartParams::default();
    if let Some(v) = get("bart_trees") {
        bart.n_trees = parse_value("bart_trees", v)?;
    }
    if let Some(v) = get("bart_burn") {
        bart.n_burn = parse_value("bart_burn", v)?;
    }
    if let Some(v) = get("bart_draws") {
        bart.n_draws = parse_value("bart_draws", v)?;
    }
    bart.validate()?;
    let interval = match get("bart_interval") {
        None | Some("normal") => BartInterval::Normal,
        Some("quantile") => BartInterval::Quantile,
        Some(v) => return Err(Error::Config(format!("key `bart_interval`: unknown value `{v}`"))),
    };

    let names: Vec<String> = crate::sim::COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let moderators = match get("moderators") {
        Some(v) => Moderators::parse(v, &names)
            .map_err(|e| Error::Config(format!("key `moderators`: {e}")))?,
        None => Moderators::All,
    };
    let oracle_se2 = match get("oracle_se2") {
        Some(v) => parse_value("oracle_se2", v)?,
        None => 1e-6,
    };

    let mut methods = Vec::new();
    for name in get("methods").unwrap_or("linear").split(',').map(str::trim) {
        methods.push(match name {
            "linear" => Stage1Method::Linear(moderators.clone()),
            "honest_forest" => Stage1Method::Forest(ForestParams { honest: true, ..forest.clone() }),
            "adaptive_forest" => Stage1Method::Forest(ForestParams { honest: false, ..forest.clone() }),
            "bart" => Stage1Method::Bart { params: bart.clone(), interval },
            "oracle" => Stage1Method::Oracle { se2: oracle_se2 },
            other => return Err(Error::Config(format!("key `methods`: unknown method `{other}`"))),
        });
    }
    Ok(ExperimentConfig { sim, methods, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_file() {
        let cfg = parse_experiment(
            "# scenario\nk_studies = 4\ncate_setting = nonlinear\nheterogeneity_level = 3\n\
             methods = linear, honest_forest\nforest_trees = 100\nn_replications=7\n",
        )
        .unwrap();
        assert_eq!(cfg.sim.k_studies, 4);
        assert_eq!(cfg.sim.cate_setting, CateSetting::Nonlinear);
        assert_eq!(cfg.sim.scales, EffectScales::level(3).unwrap());
        assert_eq!(cfg.sim.n_replications, 7);
        assert_eq!(cfg.methods.len(), 2);
        assert_eq!(cfg.methods[1].label(), "honest_forest");
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_experiment("k_studies = ten").unwrap_err();
        assert!(e.to_string().contains("k_studies"), "{e}");
        let e = parse_experiment("colour = red").unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = parse_experiment("heterogeneity_level = 4").unwrap_err();
        assert!(e.to_string().contains("heterogeneity_level"), "{e}");
        assert!(parse_experiment("alpha = 1.5").is_err());
        assert!(parse_experiment("k_studies = 4\nk_studies = 5").is_err());
    }

    #[test]
    fn sigma_override_clears_level() {
        let cfg = parse_experiment("sigma_a = 0\nsigma_b = 0\nsigma_c = 0").unwrap();
        assert_eq!(cfg.sim.heterogeneity_level, 0);
        assert_eq!(cfg.sim.scales.sigma_b, 0.0);
    }
}

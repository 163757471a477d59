//! Causal forest for per-study CATE estimation.
//!
//! Trees are grouped into bags. Each bag draws a half-sample of the study
//! (stratified by arm) and each tree in the bag subsamples from it. In honest
//! mode a tree's subsample is split in two: one half chooses the splits, the
//! other estimates the leaf effects. A split maximizes `sum_children n * tau^2`
//! where `tau` is the treated-minus-control mean difference in the child.
//!
//! The variance of the forest prediction is estimated from the spread of bag
//! means, corrected for within-bag Monte-Carlo noise and floored at a small
//! positive value.

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CovariateProfile, StudyCateEstimate, TrialDataset};
use crate::rng::{stream, Purpose};
use crate::scalar::{mean, sample_variance, Scalar};

/// Relative size of the variance floor, as a fraction of the outcome variance.
pub const SE2_FLOOR_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub honest: bool,
    pub min_leaf_treated: usize,
    pub min_leaf_control: usize,
    /// Fraction of each arm used per tree.
    pub subsample_fraction: f64,
    /// Covariates tried per split; `None` means all of them.
    pub mtry: Option<usize>,
    /// Trees per variance bag.
    pub bag_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            honest: true,
            min_leaf_treated: 5,
            min_leaf_control: 5,
            subsample_fraction: 0.5,
            mtry: None,
            bag_size: 20,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self, p: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_trees == 0 || self.bag_size == 0 {
            return err("n_trees and bag_size must be positive".into());
        }
        if self.n_trees % self.bag_size != 0 {
            return err(format!(
                "n_trees ({}) must be divisible by bag_size ({})",
                self.n_trees, self.bag_size
            ));
        }
        if self.min_leaf_treated < 2 || self.min_leaf_control < 2 {
            return err("minimum leaf sizes must be at least 2".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return err(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            ));
        }
        if self.bag_size >= 2 && self.subsample_fraction > 0.5 {
            return err("subsample_fraction must be <= 0.5 when bag_size >= 2".into());
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > p {
                return err(format!("mtry must be in 1..={p}, got {m}"));
            }
        }
        Ok(())
    }

    fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or(p)
    }

    /// Per-arm sizes: (half-sample, tree subsample, split part).
    fn arm_sizes(&self, n_arm: usize) -> (usize, usize, usize) {
        let pool = if self.bag_size >= 2 { n_arm / 2 } else { n_arm };
        let sub = ((self.subsample_fraction * n_arm as f64).floor() as usize).min(pool);
        let split = if self.honest { sub / 2 } else { sub };
        (pool, sub, split)
    }

    fn check_feasible(&self, n_treated: usize, n_control: usize) -> Result<()> {
        for (arm, n_arm, min_leaf) in [
            ("treated", n_treated, self.min_leaf_treated),
            ("control", n_control, self.min_leaf_control),
        ] {
            let (_, sub, split) = self.arm_sizes(n_arm);
            let est = if self.honest { sub - split } else { sub };
            if split < min_leaf || est < min_leaf {
                return Err(Error::Config(format!(
                    "{arm} arm has {n_arm} rows; each tree gets {split} for splitting and \
                     {est} for estimation, below the leaf minimum {min_leaf}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
    Leaf {
        tau: T,
        n_treated: usize,
        n_control: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalTree<T> {
    nodes: Vec<Node<T>>,
    split_rows: Vec<u32>,
    estimation_rows: Vec<u32>,
}

impl<T: Scalar> CausalTree<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    /// Rows used to choose splits.
    pub fn split_rows(&self) -> &[u32] {
        &self.split_rows
    }

    /// Rows used to estimate leaf effects (equal to the split rows when the
    /// forest is adaptive).
    pub fn estimation_rows(&self) -> &[u32] {
        &self.estimation_rows
    }

    fn leaf_for(&self, x: &[T]) -> &Node<T> {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    /// Leaf effect for `x`, or `None` when the leaf lacks an arm.
    pub fn predict(&self, x: &[T]) -> Option<T> {
        match self.leaf_for(x) {
            Node::Leaf {
                tau,
                n_treated,
                n_control,
            } if *n_treated > 0 && *n_control > 0 => Some(*tau),
            _ => None,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Node<T>> {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalForestModel<T> {
    trees: Vec<CausalTree<T>>,
    params: ForestParams,
    n_covariates: usize,
    study_id: u32,
    se2_floor: T,
}

impl<T: Scalar> CausalForestModel<T> {
    pub fn trees(&self) -> &[CausalTree<T>] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn se2_floor(&self) -> T {
        self.se2_floor
    }

    /// Per-tree predictions, `None` for skipped trees.
    pub fn tree_predictions(&self, x: &[T]) -> Vec<Option<T>> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }
}

/// Column-major copy of the data used while growing.
struct Columns<T> {
    x: Vec<Vec<T>>,
    y: Vec<T>,
    treated: Vec<bool>,
}

#[derive(Clone, Copy, Default)]
struct ArmStats<T> {
    n1: usize,
    n0: usize,
    s1: T,
    s0: T,
}

impl<T: Scalar> ArmStats<T> {
    fn add(&mut self, y: T, treated: bool) {
        if treated {
            self.n1 += 1;
            self.s1 += y;
        } else {
            self.n0 += 1;
            self.s0 += y;
        }
    }

    fn minus(&self, other: &Self) -> Self {
        Self {
            n1: self.n1 - other.n1,
            n0: self.n0 - other.n0,
            s1: self.s1 - other.s1,
            s0: self.s0 - other.s0,
        }
    }

    fn tau(&self) -> T {
        if self.n1 == 0 || self.n0 == 0 {
            return T::zero();
        }
        self.s1 / T::from_usize_lossy(self.n1) - self.s0 / T::from_usize_lossy(self.n0)
    }

    fn n(&self) -> usize {
        self.n1 + self.n0
    }

    fn meets(&self, min_treated: usize, min_control: usize) -> bool {
        self.n1 >= min_treated && self.n0 >= min_control
    }
}

fn stats_of<T: Scalar>(cols: &Columns<T>, rows: &[u32]) -> ArmStats<T> {
    let mut s = ArmStats::default();
    for &r in rows {
        let r = r as usize;
        s.add(cols.y[r], cols.treated[r]);
    }
    s
}

struct SplitChoice<T> {
    feature: usize,
    threshold: T,
    score: T,
}

struct Grower<'a, T> {
    cols: &'a Columns<T>,
    params: &'a ForestParams,
    mtry: usize,
}

impl<T: Scalar> Grower<'_, T> {
    fn grow(&self, split_rows: Vec<u32>, est_rows: Vec<u32>, rng: &mut impl Rng) -> Vec<Node<T>> {
        let mut nodes = Vec::new();
        // (node slot, split rows, estimation rows)
        let mut stack = vec![(0usize, split_rows, est_rows)];
        nodes.push(Node::Leaf {
            tau: T::zero(),
            n_treated: 0,
            n_control: 0,
        });
        while let Some((slot, split, est)) = stack.pop() {
            let leaf_stats = stats_of(self.cols, &est);
            let choice = self.best_split(&split, &est, rng);
            let Some(choice) = choice else {
                nodes[slot] = Node::Leaf {
                    tau: leaf_stats.tau(),
                    n_treated: leaf_stats.n1,
                    n_control: leaf_stats.n0,
                };
                continue;
            };
            let column = &self.cols.x[choice.feature];
            let (split_l, split_r): (Vec<u32>, Vec<u32>) =
                split.iter().partition(|&&r| column[r as usize] <= choice.threshold);
            let (est_l, est_r): (Vec<u32>, Vec<u32>) = if self.params.honest {
                est.iter().partition(|&&r| column[r as usize] <= choice.threshold)
            } else {
                (split_l.clone(), split_r.clone())
            };
            let left = nodes.len();
            let right = left + 1;
            let placeholder = Node::Leaf {
                tau: T::zero(),
                n_treated: 0,
                n_control: 0,
            };
            nodes.push(placeholder.clone());
            nodes.push(placeholder);
            nodes[slot] = Node::Split {
                feature: choice.feature,
                threshold: choice.threshold,
                left,
                right,
            };
            // right first so the left subtree is numbered first
            stack.push((right, split_r, est_r));
            stack.push((left, split_l, est_l));
        }
        nodes
    }

    fn best_split(&self, split: &[u32], est: &[u32], rng: &mut impl Rng) -> Option<SplitChoice<T>> {
        let p = self.cols.x.len();
        let (min1, min0) = (self.params.min_leaf_treated, self.params.min_leaf_control);
        let total = stats_of(self.cols, split);
        let est_total = stats_of(self.cols, est);
        if !total.meets(2 * min1, 2 * min0) || !est_total.meets(2 * min1, 2 * min0) {
            return None;
        }
        let mut features: Vec<usize> = index::sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();
        let mut best: Option<SplitChoice<T>> = None;
        let mut order: Vec<u32> = split.to_vec();
        let mut est_order: Vec<u32> = est.to_vec();
        for f in features {
            let col = &self.cols.x[f];
            let key = |r: &u32| col[*r as usize];
            order.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
            if self.params.honest {
                est_order.sort_by(|a, b| {
                    key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal)
                });
            }
            let mut left = ArmStats::default();
            let mut est_left = ArmStats::default();
            let mut est_ptr = 0;
            for i in 0..order.len() - 1 {
                let r = order[i] as usize;
                left.add(self.cols.y[r], self.cols.treated[r]);
                let (lo, hi) = (col[r], col[order[i + 1] as usize]);
                if !(lo < hi) {
                    continue;
                }
                let mut threshold = (lo + hi) * T::lit(0.5);
                if threshold >= hi {
                    threshold = lo;
                }
                let right = total.minus(&left);
                if !left.meets(min1, min0) || !right.meets(min1, min0) {
                    continue;
                }
                if self.params.honest {
                    while est_ptr < est_order.len() && col[est_order[est_ptr] as usize] <= threshold {
                        let e = est_order[est_ptr] as usize;
                        est_left.add(self.cols.y[e], self.cols.treated[e]);
                        est_ptr += 1;
                    }
                    let est_right = est_total.minus(&est_left);
                    if !est_left.meets(min1, min0) || !est_right.meets(min1, min0) {
                        continue;
                    }
                }
                let (tl, tr) = (left.tau(), right.tau());
                let score = T::from_usize_lossy(left.n()) * tl * tl
                    + T::from_usize_lossy(right.n()) * tr * tr;
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(SplitChoice {
                        feature: f,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

/// Grows a causal forest on one study.
pub fn fit_causal_forest<T: Scalar>(
    dataset: &TrialDataset<T>,
    params: &ForestParams,
) -> Result<CausalForestModel<T>> {
    dataset.ensure_valid()?;
    let p = dataset.n_covariates();
    params.validate(p)?;
    params.check_feasible(dataset.n_treated(), dataset.n_control())?;

    let rows = dataset.rows();
    let cols = Columns {
        x: (0..p).map(|j| rows.iter().map(|r| r.x[j]).collect()).collect(),
        y: rows.iter().map(|r| r.y).collect(),
        treated: rows.iter().map(|r| r.treated).collect(),
    };
    let treated_idx: Vec<u32> = (0..rows.len() as u32).filter(|&i| rows[i as usize].treated).collect();
    let control_idx: Vec<u32> = (0..rows.len() as u32).filter(|&i| !rows[i as usize].treated).collect();
    let (pool1, sub1, split1) = params.arm_sizes(treated_idx.len());
    let (pool0, sub0, split0) = params.arm_sizes(control_idx.len());

    let n_bags = params.n_trees / params.bag_size;
    // arms are drawn in an order fixed by row 0, not by the label, so that
    // relabelling the arms reproduces the same subsamples
    let treated_first = rows[0].treated;
    let bags: Vec<(Vec<u32>, Vec<u32>)> = (0..n_bags)
        .map(|b| {
            let mut rng = stream(params.seed, b as u64, Purpose::Bag);
            if treated_first {
                let t = draw(&treated_idx, pool1, &mut rng);
                (t, draw(&control_idx, pool0, &mut rng))
            } else {
                let c = draw(&control_idx, pool0, &mut rng);
                (draw(&treated_idx, pool1, &mut rng), c)
            }
        })
        .collect();

    let grower = Grower {
        cols: &cols,
        params,
        mtry: params.mtry_for(p),
    };
    let trees: Vec<CausalTree<T>> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(params.seed, t as u64, Purpose::Tree);
            let (bag1, bag0) = &bags[t / params.bag_size];
            let (mut first, mut second) = if treated_first {
                let t = draw(bag1, sub1, &mut rng);
                (t, draw(bag0, sub0, &mut rng))
            } else {
                let c = draw(bag0, sub0, &mut rng);
                (c, draw(bag1, sub1, &mut rng))
            };
            let (split_first, split_second) =
                if treated_first { (split1, split0) } else { (split0, split1) };
            let (split_rows, est_rows) = if params.honest {
                let mut est = first.split_off(split_first);
                est.extend(second.split_off(split_second));
                first.extend(second);
                (first, est)
            } else {
                first.extend(second);
                (first.clone(), first)
            };
            let nodes = grower.grow(split_rows.clone(), est_rows.clone(), &mut rng);
            CausalTree {
                nodes,
                split_rows,
                estimation_rows: est_rows,
            }
        })
        .collect();

    Ok(CausalForestModel {
        trees,
        params: params.clone(),
        n_covariates: p,
        study_id: dataset.study_id(),
        se2_floor: T::lit(SE2_FLOOR_FRACTION) * dataset.outcome_variance(),
    })
}

/// `k` rows drawn without replacement, in random order.
fn draw(from: &[u32], k: usize, rng: &mut impl Rng) -> Vec<u32> {
    if k >= from.len() {
        let mut all = from.to_vec();
        all.shuffle(rng);
        return all;
    }
    index::sample(rng, from.len(), k)
        .into_iter()
        .map(|i| from[i])
        .collect()
}

/// Between-bag variance estimate: `Var(bag means) - mean(Var within bag / g)`,
/// floored at `floor`. Skipped trees (`None`) are left out of their bag.
pub fn bag_variance<T: Scalar>(predictions: &[Option<T>], bag_size: usize, floor: T) -> T {
    let mut bag_means = Vec::new();
    let mut within = Vec::new();
    for bag in predictions.chunks(bag_size.max(1)) {
        let vals: Vec<T> = bag.iter().flatten().copied().collect();
        if vals.is_empty() {
            continue;
        }
        bag_means.push(mean(&vals));
        within.push(sample_variance(&vals) / T::from_usize_lossy(vals.len()));
    }
    let between = sample_variance(&bag_means);
    let correction = if bag_size >= 2 { mean(&within) } else { T::zero() };
    (between - correction).max(floor)
}

/// Forest CATE estimate and variance at one profile.
pub fn forest_cate<T: Scalar>(
    model: &CausalForestModel<T>,
    profile: &CovariateProfile<T>,
) -> Result<StudyCateEstimate<T>> {
    profile.check_dim(model.n_covariates)?;
    let preds = model.tree_predictions(&profile.x);
    let used: Vec<T> = preds.iter().flatten().copied().collect();
    if used.len() * 2 < preds.len() {
        return Err(Error::Profile {
            profile_id: profile.profile_id,
            reason: format!(
                "{} of {} trees reached a leaf with an empty arm",
                preds.len() - used.len(),
                preds.len()
            ),
        });
    }
    let tau_hat = mean(&used);
    let se2 = bag_variance(&preds, model.params.bag_size, model.se2_floor);
    StudyCateEstimate::new(model.study_id, profile.profile_id, tau_hat, se2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrialRow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_data(n: usize, seed: u64, tau: impl Fn(f64) -> f64) -> TrialDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let x0: f64 = rng.random_range(-1.0..1.0);
                let x1: f64 = rng.random_range(-1.0..1.0);
                let a = i % 2 == 0;
                let y = x1 + if a { tau(x0) } else { 0.0 } + 0.1 * rng.random_range(-1.0..1.0);
                TrialRow::new(y, a, vec![x0, x1])
            })
            .collect();
        TrialDataset::new(1, vec!["x0".into(), "x1".into()], rows)
    }

    fn params(n_trees: usize, honest: bool) -> ForestParams {
        ForestParams {
            n_trees,
            honest,
            bag_size: 10,
            seed: 11,
            ..ForestParams::default()
        }
    }

    #[test]
    fn bag_variance_hand_value() {
        let preds = [Some(1.0), Some(1.0), Some(3.0), Some(3.0)];
        assert_eq!(bag_variance(&preds, 2, 1e-9), 2.0);
        // within-bag noise is subtracted: bags {0,2} and {2,4}
        let preds = [Some(0.0), Some(2.0), Some(2.0), Some(4.0)];
        // between = Var{1,3} = 2; within = 2/2 = 1 per bag
        assert_eq!(bag_variance(&preds, 2, 1e-9), 1.0);
        assert_eq!(bag_variance(&[Some(2.0); 6], 3, 0.25), 0.25);
    }

    #[test]
    fn identical_single_leaf_trees_hit_floor() {
        // min leaf too large to split; noiseless constant effect
        let rows = (0..200)
            .map(|i| {
                let a = i % 2 == 1;
                TrialRow::new(if a { 2.0 } else { 0.0 }, a, vec![i as f64])
            })
            .collect();
        let ds = TrialDataset::new(1, vec!["x".into()], rows);
        let p = ForestParams {
            n_trees: 40,
            min_leaf_treated: 20,
            min_leaf_control: 20,
            ..params(40, true)
        };
        let model = fit_causal_forest(&ds, &p).unwrap();
        assert!(model.trees().iter().all(|t| t.nodes().len() == 1));
        let est = forest_cate(&model, &CovariateProfile::new(1, vec![3.0])).unwrap();
        assert_eq!(est.tau_hat, 2.0);
        assert_eq!(est.se2, model.se2_floor());
        assert!(est.se2 > 0.0);
    }

    #[test]
    fn honest_partition_is_disjoint_and_leaves_meet_minimum() {
        let ds = small_data(400, 3, |x| if x > 0.0 { 1.0 } else { -1.0 });
        let p = params(20, true);
        let model = fit_causal_forest(&ds, &p).unwrap();
        for tree in model.trees() {
            let split: std::collections::HashSet<_> = tree.split_rows().iter().collect();
            assert!(tree.estimation_rows().iter().all(|r| !split.contains(r)));
            for leaf in tree.leaves() {
                if let Node::Leaf {
                    n_treated,
                    n_control,
                    ..
                } = leaf
                {
                    assert!(*n_treated >= p.min_leaf_treated && *n_control >= p.min_leaf_control);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_antisymmetric() {
        let ds = small_data(300, 5, |x| 1.0 + x);
        let p = params(20, true);
        let m1 = fit_causal_forest(&ds, &p).unwrap();
        let m2 = fit_causal_forest(&ds, &p).unwrap();
        assert_eq!(m1, m2);
        let swapped = fit_causal_forest(&ds.with_swapped_treatment(), &p).unwrap();
        for x in [-0.5, 0.0, 0.7] {
            let prof = CovariateProfile::new(1, vec![x, 0.1]);
            let a = forest_cate(&m1, &prof).unwrap();
            let b = forest_cate(&swapped, &prof).unwrap();
            assert_eq!(a.tau_hat, -b.tau_hat);
            assert_eq!(a.se2, b.se2);
        }
    }

    #[test]
    fn config_errors() {
        let ds = small_data(30, 1, |_| 1.0);
        assert!(matches!(
            fit_causal_forest(&ds, &params(20, true)),
            Err(Error::Config(_))
        ));
        let bad = ForestParams {
            n_trees: 15,
            ..params(15, true)
        };
        assert!(bad.validate(2).is_err());
        let bad = ForestParams {
            min_leaf_treated: 1,
            ..ForestParams::default()
        };
        assert!(bad.validate(2).is_err());
        let bad = ForestParams {
            subsample_fraction: 0.8,
            ..ForestParams::default()
        };
        assert!(bad.validate(2).is_err());
        let ok = ForestParams {
            subsample_fraction: 0.8,
            bag_size: 1,
            ..ForestParams::default()
        };
        assert!(ok.validate(2).is_ok());
    }

    #[test]
    fn adaptive_uses_same_rows() {
        let ds = small_data(300, 9, |_| 1.0);
        let model = fit_causal_forest(&ds, &params(10, false)).unwrap();
        for t in model.trees() {
            assert_eq!(t.split_rows(), t.estimation_rows());
        }
    }
}

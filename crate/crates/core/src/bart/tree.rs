//! A single regression tree of the sum-of-trees model, with the
//! grow/prune/change Metropolis-Hastings moves of the backfitting sampler.
//!
//! Nodes live in an arena; `leaf_of[i]` caches the leaf holding row `i` so a
//! move only touches the rows under the node it modifies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TreePrior {
    pub alpha: f64,
    pub beta: f64,
    /// Leaf prior variance on the scaled outcome.
    pub mu_var: f64,
}

impl TreePrior {
    fn split_prob(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Leaf { mu: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    kind: Kind,
    parent: Option<usize>,
    depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    leaf_of: Vec<usize>,
}

/// Row-major feature matrix shared by all trees.
pub(crate) struct Design<'a> {
    pub x: &'a [Vec<f64>],
    pub p: usize,
}

const P_GROW: f64 = 0.5;
const P_PRUNE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Grow,
    Prune,
    Change,
}

/// Log marginal likelihood of a leaf's residuals with `mu` integrated out,
/// dropping terms that cancel between competing trees.
fn leaf_loglik(n: usize, sum: f64, sigma2: f64, mu_var: f64) -> f64 {
    let n = n as f64;
    let denom = sigma2 + n * mu_var;
    -0.5 * (denom / sigma2).ln() + mu_var * sum * sum / (2.0 * sigma2 * denom)
}

impl Tree {
    pub fn new(n_rows: usize) -> Self {
        Self {
            nodes: vec![Some(Node {
                kind: Kind::Leaf { mu: 0.0 },
                parent: None,
                depth: 0,
            })],
            free: Vec::new(),
            leaf_of: vec![0; n_rows],
        }
    }

    fn node(&self, i: usize) -> &Node {
        self.nodes[i].as_ref().expect("live node")
    }

    fn node_mut(&mut self, i: usize) -> &mut Node {
        self.nodes[i].as_mut().expect("live node")
    }

    fn alloc(&mut self, node: Node) -> usize {
        match self.free.pop() {
            Some(i) => {
                self.nodes[i] = Some(node);
                i
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        }
    }

    fn live(&self) -> impl Iterator<Item = (usize, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|n| (i, n)))
    }

    fn leaves(&self) -> Vec<usize> {
        self.live()
            .filter(|(_, n)| matches!(n.kind, Kind::Leaf { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    fn is_leaf(&self, i: usize) -> bool {
        matches!(self.node(i).kind, Kind::Leaf { .. })
    }

    /// Internal nodes whose children are both leaves.
    fn prunable(&self) -> Vec<usize> {
        self.live()
            .filter_map(|(i, n)| match n.kind {
                Kind::Split { left, right, .. } if self.is_leaf(left) && self.is_leaf(right) => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Current fitted value for each training row.
    pub fn fitted(&self, out: &mut [f64]) {
        for (o, &leaf) in out.iter_mut().zip(&self.leaf_of) {
            *o = match self.node(leaf).kind {
                Kind::Leaf { mu } => mu,
                Kind::Split { .. } => unreachable!("rows always sit in leaves"),
            };
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.node(i).kind {
                Kind::Leaf { mu } => return mu,
                Kind::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    fn rows_in(&self, leaves: &[usize]) -> Vec<usize> {
        (0..self.leaf_of.len())
            .filter(|&r| leaves.contains(&self.leaf_of[r]))
            .collect()
    }

    /// Draws a split rule for `rows`; both children are nonempty.
    fn draw_rule(design: &Design<'_>, rows: &[usize], rng: &mut impl Rng) -> Option<(usize, f64)> {
        let usable: Vec<usize> = (0..design.p)
            .filter(|&f| {
                let first = design.x[rows[0]][f];
                rows.iter().any(|&r| design.x[r][f] != first)
            })
            .collect();
        if usable.is_empty() {
            return None;
        }
        let feature = usable[rng.random_range(0..usable.len())];
        let mut values: Vec<f64> = rows.iter().map(|&r| design.x[r][feature]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite covariates"));
        values.dedup();
        // the largest value would send every row left
        values.pop();
        Some((feature, values[rng.random_range(0..values.len())]))
    }

    fn sums(resid: &[f64], rows: &[usize], design: &Design<'_>, rule: (usize, f64)) -> (usize, f64, usize, f64) {
        let (mut nl, mut sl, mut nr, mut sr) = (0, 0.0, 0, 0.0);
        for &r in rows {
            if design.x[r][rule.0] <= rule.1 {
                nl += 1;
                sl += resid[r];
            } else {
                nr += 1;
                sr += resid[r];
            }
        }
        (nl, sl, nr, sr)
    }

    /// One MH step against the partial residuals. Returns whether the tree changed.
    pub fn mh_step(
        &mut self,
        design: &Design<'_>,
        resid: &[f64],
        sigma2: f64,
        prior: &TreePrior,
        rng: &mut impl Rng,
    ) -> bool {
        let single = self.is_leaf(0);
        let mv = if single {
            Move::Grow
        } else {
            let u: f64 = rng.random();
            if u < P_GROW {
                Move::Grow
            } else if u < P_GROW + P_PRUNE {
                Move::Prune
            } else {
                Move::Change
            }
        };
        match mv {
            Move::Grow => self.grow(design, resid, sigma2, prior, rng),
            Move::Prune => self.prune(resid, sigma2, prior, rng),
            Move::Change => self.change(design, resid, sigma2, prior, rng),
        }
    }

    fn grow(&mut self, design: &Design<'_>, resid: &[f64], sigma2: f64, prior: &TreePrior, rng: &mut impl Rng) -> bool {
        let leaves = self.leaves();
        let b = leaves.len();
        let leaf = leaves[rng.random_range(0..b)];
        let rows = self.rows_in(&[leaf]);
        if rows.len() < 2 {
            return false;
        }
        let Some(rule) = Self::draw_rule(design, &rows, rng) else {
            return false;
        };
        let (nl, sl, nr, sr) = Self::sums(resid, &rows, design, rule);
        let depth = self.node(leaf).depth;

        // prunable count after growing: the new node joins, its parent may leave
        let mut w2 = self.prunable().len() + 1;
        if let Some(parent) = self.node(leaf).parent {
            if self.prunable().contains(&parent) {
                w2 -= 1;
            }
        }
        let p_grow_here = if b == 1 { 1.0 } else { P_GROW };
        let log_transition = (P_PRUNE / w2 as f64).ln() - (p_grow_here / b as f64).ln();
        let ps = prior.split_prob(depth);
        let ps_child = prior.split_prob(depth + 1);
        let log_prior = ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln();
        let log_lik = leaf_loglik(nl, sl, sigma2, prior.mu_var) + leaf_loglik(nr, sr, sigma2, prior.mu_var)
            - leaf_loglik(nl + nr, sl + sr, sigma2, prior.mu_var);
        let log_ratio = log_transition + log_prior + log_lik;
        if rng.random::<f64>().ln() >= log_ratio {
            return false;
        }
        let child = Node { kind: Kind::Leaf { mu: 0.0 }, parent: Some(leaf), depth: depth + 1 };
        let left = self.alloc(child.clone());
        let right = self.alloc(child);
        self.node_mut(leaf).kind = Kind::Split { feature: rule.0, threshold: rule.1, left, right };
        for r in rows {
            self.leaf_of[r] = if design.x[r][rule.0] <= rule.1 { left } else { right };
        }
        true
    }

    fn prune(&mut self, resid: &[f64], sigma2: f64, prior: &TreePrior, rng: &mut impl Rng) -> bool {
        let candidates = self.prunable();
        let w2 = candidates.len();
        let node = candidates[rng.random_range(0..w2)];
        let Kind::Split { left, right, .. } = self.node(node).kind else { unreachable!() };
        let b_after = self.leaves().len() - 1;
        let (mut nl, mut sl, mut nr, mut sr) = (0, 0.0, 0, 0.0);
        for (r, &leaf) in self.leaf_of.iter().enumerate() {
            if leaf == left {
                nl += 1;
                sl += resid[r];
            } else if leaf == right {
                nr += 1;
                sr += resid[r];
            }
        }
        let depth = self.node(node).depth;
        let p_grow_back = if b_after == 1 { 1.0 } else { P_GROW };
        let log_transition = (p_grow_back / b_after as f64).ln() - (P_PRUNE / w2 as f64).ln();
        let ps = prior.split_prob(depth);
        let ps_child = prior.split_prob(depth + 1);
        let log_prior = -(ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln());
        let log_lik = leaf_loglik(nl + nr, sl + sr, sigma2, prior.mu_var)
            - leaf_loglik(nl, sl, sigma2, prior.mu_var)
            - leaf_loglik(nr, sr, sigma2, prior.mu_var);
        if rng.random::<f64>().ln() >= log_transition + log_prior + log_lik {
            return false;
        }
        self.nodes[left] = None;
        self.nodes[right] = None;
        self.free.extend([left, right]);
        self.node_mut(node).kind = Kind::Leaf { mu: 0.0 };
        for leaf in self.leaf_of.iter_mut() {
            if *leaf == left || *leaf == right {
                *leaf = node;
            }
        }
        true
    }

    fn change(&mut self, design: &Design<'_>, resid: &[f64], sigma2: f64, prior: &TreePrior, rng: &mut impl Rng) -> bool {
        let candidates = self.prunable();
        let node = candidates[rng.random_range(0..candidates.len())];
        let Kind::Split { feature, threshold, left, right } = self.node(node).kind else { unreachable!() };
        let rows = self.rows_in(&[left, right]);
        let Some(rule) = Self::draw_rule(design, &rows, rng) else {
            return false;
        };
        let (nl, sl, nr, sr) = Self::sums(resid, &rows, design, rule);
        let (ol, osl, or, osr) = Self::sums(resid, &rows, design, (feature, threshold));
        let log_ratio = leaf_loglik(nl, sl, sigma2, prior.mu_var) + leaf_loglik(nr, sr, sigma2, prior.mu_var)
            - leaf_loglik(ol, osl, sigma2, prior.mu_var)
            - leaf_loglik(or, osr, sigma2, prior.mu_var);
        if rng.random::<f64>().ln() >= log_ratio {
            return false;
        }
        self.node_mut(node).kind = Kind::Split { feature: rule.0, threshold: rule.1, left, right };
        for r in rows {
            self.leaf_of[r] = if design.x[r][rule.0] <= rule.1 { left } else { right };
        }
        true
    }

    /// Draws every leaf value from its conjugate normal posterior.
    pub fn draw_leaves(&mut self, resid: &[f64], sigma2: f64, mu_var: f64, rng: &mut impl Rng) {
        let mut stats = vec![(0usize, 0.0f64); self.nodes.len()];
        for (r, &leaf) in self.leaf_of.iter().enumerate() {
            stats[leaf].0 += 1;
            stats[leaf].1 += resid[r];
        }
        for leaf in self.leaves() {
            let (n, sum) = stats[leaf];
            let denom = sigma2 + n as f64 * mu_var;
            let mean = mu_var * sum / denom;
            let sd = (sigma2 * mu_var / denom).sqrt();
            let z: f64 = StandardNormal.sample(rng);
            self.node_mut(leaf).kind = Kind::Leaf { mu: mean + sd * z };
        }
    }

    #[cfg(test)]
    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaf_loglik_prefers_a_split_between_separated_groups() {
        // two groups at -1 and +1: splitting explains them
        let whole = leaf_loglik(20, 0.0, 0.01, 0.1);
        let split = leaf_loglik(10, -10.0, 0.01, 0.1) + leaf_loglik(10, 10.0, 0.01, 0.1);
        assert!(split > whole);
    }

    #[test]
    fn grow_then_prune_keeps_rows_in_leaves() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 2) as f64]).collect();
        let design = Design { x: &x, p: 2 };
        let resid: Vec<f64> = (0..40).map(|i| if i < 20 { -1.0 } else { 1.0 }).collect();
        let prior = TreePrior { alpha: 0.95, beta: 2.0, mu_var: 0.1 };
        let mut tree = Tree::new(40);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            tree.mh_step(&design, &resid, 0.01, &prior, &mut rng);
            for (r, &leaf) in tree.leaf_of.iter().enumerate() {
                assert!(tree.is_leaf(leaf));
                // the cached leaf matches a fresh traversal
                let mut i = 0;
                while let Kind::Split { feature, threshold, left, right } = tree.node(i).kind {
                    i = if x[r][feature] <= threshold { left } else { right };
                }
                assert_eq!(i, leaf);
            }
        }
        assert!(tree.n_leaves() >= 2);
        tree.draw_leaves(&resid, 0.01, 0.1, &mut rng);
        let mut fitted = vec![0.0; 40];
        tree.fitted(&mut fitted);
        assert!(fitted[0] < 0.0 && fitted[39] > 0.0);
    }
}

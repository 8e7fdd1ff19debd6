//! Random forest over categorical features with equality splits.
//!
//! Every internal node asks "is feature `f` equal to `v`?"; impurity is
//! Gini. Each tree sees a bootstrap sample (optional) and, per node, a
//! uniformly drawn subset of the features. Trees are grown in parallel with
//! seeds derived from the master seed, so results do not depend on the
//! thread count.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::model::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    /// `ceil(sqrt(n_features))` per node.
    Sqrt,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub n_trees: usize,
    /// `None` grows until purity.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub max_features: MaxFeatures,
    pub seed: u64,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions { n_trees: 100, max_depth: None, bootstrap: true, max_features: MaxFeatures::Sqrt, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    /// Go to `yes` when `x[feature] == value`, else to `no` (node indices).
    Split { feature: usize, value: u8, yes: usize, no: usize },
    /// Class counts of the training samples that reached the leaf.
    Leaf { counts: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_counts(&self, x: &[u8]) -> &[usize] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split { feature, value, yes, no } => i = if x[*feature] == *value { *yes } else { *no },
                Node::Leaf { counts } => return counts,
            }
        }
    }

    /// Majority class of the reached leaf (ties to the lower class).
    pub fn predict(&self, x: &[u8]) -> usize {
        let counts: Vec<f64> = self.leaf_counts(x).iter().map(|&c| c as f64).collect();
        argmax(&counts)
    }

    pub fn root_split(&self) -> Option<(usize, u8)> {
        match self.nodes.first() {
            Some(Node::Split { feature, value, .. }) => Some((*feature, *value)),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { yes, no, .. } => 1 + go(t, *yes).max(go(t, *no)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub n_features: usize,
    pub options: ForestOptions,
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Plurality over tree votes; ties to the lowest class.
    pub fn predict(&self, x: &[u8]) -> Result<usize> {
        if x.len() != self.n_features {
            return input_err(format!("{} features given, forest expects {}", x.len(), self.n_features));
        }
        let mut votes = vec![0.0; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1.0;
        }
        Ok(argmax(&votes))
    }

    pub fn predict_all(&self, xs: &[Vec<u8>]) -> Result<Vec<usize>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Distinct features used by any split.
    pub fn used_features(&self) -> BTreeSet<usize> {
        self.trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect()
    }
}

/// Gini impurity of class counts.
pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Size-weighted Gini of a two-way split.
pub fn split_impurity(yes: &[usize], no: &[usize]) -> f64 {
    let (a, b) = (yes.iter().sum::<usize>() as f64, no.iter().sum::<usize>() as f64);
    (a * gini(yes) + b * gini(no)) / (a + b)
}

fn tree_seed(master: u64, i: usize) -> u64 {
    // splitmix64 step
    let mut z = master.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn train_tree(xs: &[Vec<u8>], ys: &[usize], n_classes: usize, opts: &ForestOptions) -> Result<Forest> {
    if opts.n_trees == 0 {
        return input_err("a forest needs at least one tree");
    }
    if xs.is_empty() || xs.len() != ys.len() {
        return input_err("training data must be nonempty with one label per row");
    }
    let n_features = xs[0].len();
    if n_features == 0 || xs.iter().any(|x| x.len() != n_features) {
        return input_err("every row needs the same nonzero number of features");
    }
    if ys.iter().any(|&y| y >= n_classes) {
        return input_err("label out of range");
    }
    let trees = (0..opts.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(opts.seed, i));
            let rows: Vec<usize> = if opts.bootstrap {
                (0..xs.len()).map(|_| rng.random_range(0..xs.len())).collect()
            } else {
                (0..xs.len()).collect()
            };
            grow(xs, ys, n_classes, rows, opts, &mut rng)
        })
        .collect();
    Ok(Forest { n_classes, n_features, options: *opts, trees })
}

fn counts_of(rows: &[usize], ys: &[usize], n_classes: usize) -> Vec<usize> {
    let mut c = vec![0; n_classes];
    for &r in rows {
        c[ys[r]] += 1;
    }
    c
}

/// Best `(impurity, feature, value)` over `features`, scanning features in
/// the given order and values ascending; strict improvement only, so ties go
/// to the first candidate.
/// `sum(c^2) / n` summed over both sides, as an exact fraction. Weighted Gini
/// is `1 - this / total`, so larger is better; comparing fractions keeps ties
/// exact.
fn purity(yes: &[usize], no: &[usize]) -> (u128, u128) {
    let side = |c: &[usize]| (c.iter().map(|&x| (x * x) as u128).sum::<u128>(), c.iter().sum::<usize>() as u128);
    let ((sy, ny), (sn, nn)) = (side(yes), side(no));
    (sy * nn + sn * ny, ny * nn)
}

fn best_split(xs: &[Vec<u8>], ys: &[usize], n_classes: usize, rows: &[usize], features: &[usize], total: &[usize]) -> Option<(usize, u8)> {
    let mut best: Option<((u128, u128), usize, u8)> = None;
    // per value: class counts
    let mut table: Vec<Vec<usize>> = Vec::new();
    for &f in features {
        table.iter_mut().for_each(|c| c.iter_mut().for_each(|x| *x = 0));
        for &r in rows {
            let v = xs[r][f] as usize;
            if v >= table.len() {
                table.resize(v + 1, vec![0; n_classes]);
            }
            table[v][ys[r]] += 1;
        }
        for (v, yes) in table.iter().enumerate() {
            let n_yes: usize = yes.iter().sum();
            if n_yes == 0 || n_yes == rows.len() {
                continue;
            }
            let no: Vec<usize> = total.iter().zip(yes).map(|(t, y)| t - y).collect();
            let (p, q) = purity(yes, &no);
            if best.as_ref().is_none_or(|((bp, bq), ..)| p * bq > bp * q) {
                best = Some(((p, q), f, v as u8));
            }
        }
    }
    best.map(|(_, f, v)| (f, v))
}

fn grow(xs: &[Vec<u8>], ys: &[usize], n_classes: usize, rows: Vec<usize>, opts: &ForestOptions, rng: &mut ChaCha8Rng) -> Tree {
    let n_features = xs[0].len();
    let k = match opts.max_features {
        MaxFeatures::All => n_features,
        MaxFeatures::Sqrt => ((n_features as f64).sqrt().ceil() as usize).clamp(1, n_features),
    };
    let mut nodes: Vec<Node> = Vec::new();
    // (node index, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    nodes.push(Node::Leaf { counts: vec![] });
    while let Some((idx, rows, depth)) = stack.pop() {
        let counts = counts_of(&rows, ys, n_classes);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let capped = opts.max_depth.is_some_and(|d| depth >= d);
        if pure || capped || rows.len() < 2 {
            nodes[idx] = Node::Leaf { counts };
            continue;
        }
        let mut features: Vec<usize> = if k == n_features { (0..n_features).collect() } else { sample(rng, n_features, k).into_vec() };
        features.sort_unstable();
        let mut split = best_split(xs, ys, n_classes, &rows, &features, &counts);
        if split.is_none() && k < n_features {
            // no sampled feature varies here: keep looking through the rest
            let rest: Vec<usize> = (0..n_features).filter(|f| features.binary_search(f).is_err()).collect();
            split = best_split(xs, ys, n_classes, &rows, &rest, &counts);
        }
        let Some((feature, value)) = split else {
            nodes[idx] = Node::Leaf { counts };
            continue;
        };
        let (yes_rows, no_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| xs[r][feature] == value);
        let yes = nodes.len();
        let no = yes + 1;
        nodes.push(Node::Leaf { counts: vec![] });
        nodes.push(Node::Leaf { counts: vec![] });
        nodes[idx] = Node::Split { feature, value, yes, no };
        stack.push((no, no_rows, depth + 1));
        stack.push((yes, yes_rows, depth + 1));
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_case(seed: u64) -> (Vec<Vec<u8>>, Vec<usize>, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_classes = rng.random_range(2..=4);
        let nf = rng.random_range(1..=8);
        let n = rng.random_range(2..=64);
        let xs = (0..n).map(|_| (0..nf).map(|_| rng.random_range(0..n_classes) as u8).collect()).collect();
        let ys = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        (xs, ys, n_classes)
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&[5, 0]), 0.0);
        assert_eq!(gini(&[2, 2]), 0.5);
        assert!((split_impurity(&[2, 0], &[0, 2])).abs() < 1e-15);
    }

    #[test]
    fn separable_feature_is_learned() {
        let xs: Vec<Vec<u8>> = (0..30).map(|i| vec![(i % 3) as u8, (i % 2) as u8]).collect();
        let ys: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let f = train_tree(&xs, &ys, 2, &ForestOptions { n_trees: 1, bootstrap: false, max_features: MaxFeatures::All, ..Default::default() }).unwrap();
        assert_eq!(f.predict_all(&xs).unwrap(), ys);
        assert_eq!(f.used_features().into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn same_seed_same_forest() {
        let (xs, ys, k) = random_case(3);
        let o = ForestOptions { n_trees: 7, seed: 11, ..Default::default() };
        assert_eq!(train_tree(&xs, &ys, k, &o).unwrap(), train_tree(&xs, &ys, k, &o).unwrap());
    }

    #[test]
    fn depth_limit_holds() {
        let (xs, ys, k) = random_case(5);
        let f = train_tree(&xs, &ys, k, &ForestOptions { n_trees: 4, max_depth: Some(2), ..Default::default() }).unwrap();
        assert!(f.trees.iter().all(|t| t.depth() <= 2));
    }

    #[test]
    fn zero_trees_rejected() {
        let (xs, ys, k) = random_case(1);
        assert!(train_tree(&xs, &ys, k, &ForestOptions { n_trees: 0, ..Default::default() }).is_err());
    }
}

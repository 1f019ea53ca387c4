//! CART regression trees and the two forests built from them: a
//! Meinshausen-style quantile forest (leaf co-membership weights over the
//! training outcomes) and an averaging regression forest.
//!
//! Every tree draws its own subsample and feature subsets from a seed derived
//! from the forest seed and the tree index, so a forest is bit-identical
//! whether trees are grown serially or in parallel.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{AlqrError, Result};
use crate::linalg::Design;
use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub num_trees: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈f/3⌉.
    pub mtry: Option<usize>,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { num_trees: 500, min_leaf: 5, mtry: None, subsample: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Training rows `samples[start..end]`; `value` is their weighted mean.
    Leaf {
        start: usize,
        end: usize,
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    samples: Vec<usize>,
    /// Rows drawn for this tree, ascending.
    bag: Vec<usize>,
}

impl Tree {
    fn leaf(&self, row: &[f64]) -> (usize, usize, f64) {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Split { feature, threshold, left, right } => {
                    k = if row[feature] <= threshold { left } else { right };
                }
                Node::Leaf { start, end, value } => return (start, end, value),
            }
        }
    }

    /// Training rows sharing the query's leaf.
    pub fn leaf_members(&self, row: &[f64]) -> &[usize] {
        let (s, e, _) = self.leaf(row);
        &self.samples[s..e]
    }

    pub fn predict_mean(&self, row: &[f64]) -> f64 {
        self.leaf(row).2
    }

    /// Whether training row `i` was drawn for this tree.
    pub fn in_bag(&self, i: usize) -> bool {
        self.bag.binary_search(&i).is_ok()
    }

    /// Smallest leaf size (used by invariant checks).
    pub fn min_leaf_size(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { start, end, .. } => Some(end - start),
                _ => None,
            })
            .min()
            .unwrap_or(0)
    }

    /// A tree consisting of one leaf holding `rows`.
    pub fn single_leaf(rows: Vec<usize>, y: &[f64], w: &[f64]) -> Tree {
        let value = leaf_value(&rows, y, w);
        let mut bag = rows.clone();
        bag.sort_unstable();
        Tree { nodes: vec![Node::Leaf { start: 0, end: rows.len(), value }], samples: rows, bag }
    }
}

fn leaf_value(rows: &[usize], y: &[f64], w: &[f64]) -> f64 {
    let (mut s, mut sw) = (0.0, 0.0);
    for &i in rows {
        s += w[i] * y[i];
        sw += w[i];
    }
    if sw > 0.0 {
        s / sw
    } else {
        0.0
    }
}

struct Grower<'a> {
    x: &'a Design,
    y: &'a [f64],
    w: &'a [f64],
    min_leaf: usize,
    mtry: usize,
}

impl Grower<'_> {
    fn grow(&self, mut rows: Vec<usize>, rng: &mut Rng) -> Tree {
        let bag = rows.clone();
        let mut nodes = Vec::new();
        // (node index, start, end) still to process
        let mut stack = vec![(0usize, 0usize, rows.len())];
        nodes.push(Node::Leaf { start: 0, end: 0, value: 0.0 });
        let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        while let Some((k, lo, hi)) = stack.pop() {
            match self.best_split(&rows[lo..hi], rng, &mut scratch) {
                None => {
                    nodes[k] = Node::Leaf { start: lo, end: hi, value: leaf_value(&rows[lo..hi], self.y, self.w) };
                }
                Some((feature, threshold)) => {
                    let seg = &mut rows[lo..hi];
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        seg.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
                    let mid = lo + left.len();
                    seg[..left.len()].copy_from_slice(&left);
                    seg[left.len()..].copy_from_slice(&right);
                    let li = nodes.len();
                    nodes.push(Node::Leaf { start: 0, end: 0, value: 0.0 });
                    let ri = nodes.len();
                    nodes.push(Node::Leaf { start: 0, end: 0, value: 0.0 });
                    nodes[k] = Node::Split { feature, threshold, left: li, right: ri };
                    stack.push((ri, mid, hi));
                    stack.push((li, lo, mid));
                }
            }
        }
        Tree { nodes, samples: rows, bag }
    }

    /// Variance-reduction split over `mtry` sampled features; `None` when no
    /// admissible split improves the weighted sum of squares.
    fn best_split(&self, rows: &[usize], rng: &mut Rng, scratch: &mut Vec<(f64, usize)>) -> Option<(usize, f64)> {
        let m = rows.len();
        let f = self.x.ncols();
        if m < 2 * self.min_leaf || f == 0 || self.mtry == 0 {
            return None;
        }
        let (mut sy, mut sw) = (0.0, 0.0);
        for &i in rows {
            sy += self.w[i] * self.y[i];
            sw += self.w[i];
        }
        if sw <= 0.0 {
            return None;
        }
        let parent = sy * sy / sw;
        let mut best: Option<(f64, usize, f64)> = None;
        let features = sample(rng, f, self.mtry.min(f));
        for feature in features.iter() {
            scratch.clear();
            scratch.extend(rows.iter().map(|&i| (self.x.get(i, feature), i)));
            scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut ly, mut lw) = (0.0, 0.0);
            for pos in 0..m - 1 {
                let (xv, i) = scratch[pos];
                ly += self.w[i] * self.y[i];
                lw += self.w[i];
                let left_n = pos + 1;
                if left_n < self.min_leaf || m - left_n < self.min_leaf {
                    continue;
                }
                let next = scratch[pos + 1].0;
                if next <= xv {
                    continue;
                }
                let rw = sw - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let ry = sy - ly;
                let gain = ly * ly / lw + ry * ry / rw;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mut thr = 0.5 * (xv + next);
                    if !(thr < next) {
                        thr = xv;
                    }
                    best = Some((gain, feature, thr));
                }
            }
        }
        match best {
            Some((gain, feature, thr)) if gain > parent + 1e-12 * parent.abs().max(f64::MIN_POSITIVE) => {
                Some((feature, thr))
            }
            _ => None,
        }
    }
}

fn resolve_mtry(params: &ForestParams, f: usize) -> usize {
    params.mtry.unwrap_or(f.div_ceil(3)).min(f).max(usize::from(f > 0))
}

/// Grows `num_trees` trees on rows with positive weight.
fn grow_forest(x: &Design, y: &[f64], w: &[f64], params: &ForestParams, seed: u64) -> Result<Vec<Tree>> {
    if params.num_trees == 0 {
        return Err(AlqrError::EmptyForest);
    }
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > 0.0).collect();
    let n = rows.len();
    if n < params.min_leaf.max(1) {
        return Err(AlqrError::TooFewRows { n, required: params.min_leaf.max(1) });
    }
    let draw = ((params.subsample * n as f64).ceil() as usize).clamp(params.min_leaf.min(n), n);
    let grower = Grower { x, y, w, min_leaf: params.min_leaf.max(1), mtry: resolve_mtry(params, x.ncols()) };
    let trees = (0..params.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            let mut picked: Vec<usize> =
                if draw == n { rows.clone() } else { sample(&mut rng, n, draw).into_iter().map(|k| rows[k]).collect() };
            picked.sort_unstable();
            grower.grow(picked, &mut rng)
        })
        .collect();
    Ok(trees)
}

/// Quantile regression forest.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForest {
    pub trees: Vec<Tree>,
    pub y: Vec<f64>,
    weights: Vec<f64>,
    /// Training rows sorted by outcome.
    order: Vec<usize>,
    pub params: ForestParams,
    pub seed: u64,
}

pub fn fit_quantile_forest(
    features: &Design,
    y: &[f64],
    weights: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<QuantileForest> {
    let trees = grow_forest(features, y, weights, params, seed)?;
    let mut order: Vec<usize> = (0..y.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&i, &j| y[i].total_cmp(&y[j]).then(i.cmp(&j)));
    Ok(QuantileForest { trees, y: y.to_vec(), weights: weights.to_vec(), order, params: params.clone(), seed })
}

impl QuantileForest {
    /// Observation weights of the training outcomes for a query row.
    pub fn observation_weights(&self, row: &[f64]) -> Vec<f64> {
        self.weights_over(row, |_| true)
    }

    fn weights_over(&self, row: &[f64], use_tree: impl Fn(&Tree) -> bool) -> Vec<f64> {
        let mut acc = vec![0.0; self.y.len()];
        let mut used = 0usize;
        for tree in self.trees.iter().filter(|t| use_tree(t)) {
            used += 1;
            let members = tree.leaf_members(row);
            let sw: f64 = members.iter().map(|&i| self.weights[i]).sum();
            if sw <= 0.0 {
                continue;
            }
            for &i in members {
                acc[i] += self.weights[i] / sw;
            }
        }
        let t = used.max(1) as f64;
        for v in acc.iter_mut() {
            *v /= t;
        }
        acc
    }

    /// Predictions for several quantile levels at once (levels in any order).
    pub fn predict_quantiles(&self, row: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(AlqrError::EmptyForest);
        }
        self.quantiles_from_weights(&self.observation_weights(row), taus)
    }

    /// Out-of-bag predictions for training row `i` (features `row`): only
    /// trees that did not draw the row contribute. Falls back to every tree
    /// when the row was drawn by all of them.
    pub fn predict_quantiles_oob(&self, i: usize, row: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(AlqrError::EmptyForest);
        }
        if self.trees.iter().all(|t| t.in_bag(i)) {
            return self.predict_quantiles(row, taus);
        }
        self.quantiles_from_weights(&self.weights_over(row, |t| !t.in_bag(i)), taus)
    }

    fn quantiles_from_weights(&self, acc: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
        let total: f64 = acc.iter().sum();
        let mut levels: Vec<(f64, usize)> = taus.iter().copied().zip(0..).collect();
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = vec![0.0; taus.len()];
        let mut cum = 0.0;
        let mut pos = 0;
        let last = *self.order.last().ok_or(AlqrError::EmptyForest)?;
        for (tau, slot) in levels {
            let target = tau * total - 1e-12 * total;
            while pos < self.order.len() && cum + acc[self.order[pos]] < target {
                cum += acc[self.order[pos]];
                pos += 1;
            }
            // Skip zero-weight rows so the answer is an observed outcome that
            // actually carries weight.
            let mut k = pos;
            while k < self.order.len() && acc[self.order[k]] == 0.0 {
                k += 1;
            }
            out[slot] = if k < self.order.len() { self.y[self.order[k]] } else { self.y[last] };
        }
        Ok(out)
    }
}

pub fn qf_predict(model: &QuantileForest, row: &[f64], tau: f64) -> Result<f64> {
    Ok(model.predict_quantiles(row, &[tau])?[0])
}

/// Averaging regression forest.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionForest {
    pub trees: Vec<Tree>,
}

pub fn fit_regression_forest(
    features: &Design,
    y: &[f64],
    weights: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<RegressionForest> {
    Ok(RegressionForest { trees: grow_forest(features, y, weights, params, seed)? })
}

impl RegressionForest {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict_mean(row)).sum();
        s / self.trees.len() as f64
    }
}

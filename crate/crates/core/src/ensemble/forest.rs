//! Random forest classifier grown to purity with Gini splits.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{midpoint, ClassificationTree, DecisionTree, Node};
use crate::error::{Error, Result};
use crate::features::TrainingSet;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomForestParams {
    pub n_trees: usize,
    /// Fraction of the training set drawn (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Candidate features per split; `None` means `floor(sqrt(d))`.
    pub features_per_split: Option<usize>,
    /// `None` grows every tree to purity.
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for RandomForestParams {
    fn default() -> Self {
        RandomForestParams {
            n_trees: 1000,
            subsample_fraction: 0.1,
            features_per_split: None,
            max_depth: None,
            seed: 0,
        }
    }
}

impl RandomForestParams {
    pub fn resolved_features_per_split(&self, dim: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| ((dim as f64).sqrt().floor() as usize).max(1))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Parameter("n_trees must be >= 1".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        let m = self.resolved_features_per_split(dim);
        if m == 0 || m > dim {
            return Err(Error::Parameter(format!(
                "features_per_split must be in [1, {dim}], got {m}"
            )));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Parameter("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub params: RandomForestParams,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub trees: Vec<ClassificationTree>,
}

impl RandomForest {
    /// Summed leaf class counts over all trees, accumulated in tree order.
    pub fn votes(&self, x: &[f64]) -> Vec<u64> {
        let mut votes = vec![0u64; self.n_classes];
        for t in &self.trees {
            for (v, c) in votes.iter_mut().zip(t.leaf_counts(x)) {
                *v += *c as u64;
            }
        }
        votes
    }
}

pub fn train_random_forest(ts: &TrainingSet, p: &RandomForestParams) -> Result<RandomForest> {
    if ts.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let dim = ts.dim();
    if dim == 0 {
        return Err(Error::DimMismatch {
            expected: ts.spec.len(),
            got: 0,
        });
    }
    p.validate(dim)?;
    let n = ts.len();
    let per_tree = ((p.subsample_fraction * n as f64).floor() as usize).clamp(1, n);
    let mtry = p.resolved_features_per_split(dim);
    let trees = (0..p.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(p.seed, t as u64);
            let mut rows: Vec<u32> = sample(&mut rng, n, per_tree)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            rows.sort_unstable();
            grow_tree(ts, &mut rows, mtry, p.max_depth, &mut rng)
        })
        .collect();
    Ok(RandomForest {
        params: p.clone(),
        n_classes: ts.n_classes,
        feature_dim: dim,
        trees,
    })
}

struct Pending {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
}

fn grow_tree(
    ts: &TrainingSet,
    rows: &mut [u32],
    mtry: usize,
    max_depth: Option<usize>,
    rng: &mut rng::Rng,
) -> ClassificationTree {
    let k = ts.n_classes;
    let labels = ts.labels();
    let mut nodes = vec![Node::Leaf { index: 0 }];
    let mut counts: Vec<u32> = Vec::new();
    let mut stack = vec![Pending {
        node: 0,
        lo: 0,
        hi: rows.len(),
        depth: 0,
    }];
    let mut scratch: Vec<(f64, u8)> = Vec::with_capacity(rows.len());
    while let Some(Pending { node, lo, hi, depth }) = stack.pop() {
        let slice = &mut rows[lo..hi];
        let mut hist = vec![0u32; k];
        for &r in slice.iter() {
            hist[labels[r as usize] as usize] += 1;
        }
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = max_depth.is_some_and(|d| depth >= d);
        let split = if pure || slice.len() < 2 || depth_capped {
            None
        } else {
            best_gini_split(ts, slice, &hist, mtry, rng, &mut scratch)
        };
        match split {
            None => {
                nodes[node] = Node::Leaf {
                    index: (counts.len() / k) as u32,
                };
                counts.extend_from_slice(&hist);
            }
            Some((feature, threshold)) => {
                let mid = partition(slice, |r| ts.value(r as usize, feature) <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { index: 0 });
                nodes.push(Node::Leaf { index: 0 });
                nodes[node] = Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: left as u32,
                    right: (left + 1) as u32,
                };
                stack.push(Pending {
                    node: left + 1,
                    lo: lo + mid,
                    hi,
                    depth: depth + 1,
                });
                stack.push(Pending {
                    node: left,
                    lo,
                    hi: lo + mid,
                    depth: depth + 1,
                });
            }
        }
    }
    ClassificationTree {
        tree: DecisionTree { nodes },
        n_classes: k,
        counts,
    }
}

/// In-place partition; returns the number of elements satisfying `pred`,
/// which end up first.
pub(crate) fn partition(xs: &mut [u32], pred: impl Fn(u32) -> bool) -> usize {
    let mut i = 0;
    for j in 0..xs.len() {
        if pred(xs[j]) {
            xs.swap(i, j);
            i += 1;
        }
    }
    i
}

/// Best Gini split over `mtry` random candidate features. When none of them
/// separates the node, the remaining features are scanned in index order so
/// trees still reach purity whenever any feature can split.
fn best_gini_split(
    ts: &TrainingSet,
    rows: &[u32],
    hist: &[u32],
    mtry: usize,
    rng: &mut rng::Rng,
    scratch: &mut Vec<(f64, u8)>,
) -> Option<(usize, f64)> {
    let dim = ts.dim();
    let candidates: Vec<usize> = sample(rng, dim, mtry).into_iter().collect();
    let mut best: Option<(f64, usize, f64)> = None;
    for &f in &candidates {
        eval_feature(ts, rows, hist, f, scratch, &mut best);
    }
    if best.is_none() {
        let mut tried = vec![false; dim];
        for &f in &candidates {
            tried[f] = true;
        }
        for f in 0..dim {
            if !tried[f] {
                eval_feature(ts, rows, hist, f, scratch, &mut best);
                if best.is_some() {
                    break;
                }
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

/// Scores every threshold of feature `f`. The score `Σ cL²/nL + Σ cR²/nR` is
/// maximised, which is equivalent to minimising weighted Gini impurity.
fn eval_feature(
    ts: &TrainingSet,
    rows: &[u32],
    hist: &[u32],
    f: usize,
    scratch: &mut Vec<(f64, u8)>,
    best: &mut Option<(f64, usize, f64)>,
) {
    let labels = ts.labels();
    scratch.clear();
    scratch.extend(
        rows.iter()
            .map(|&r| (ts.value(r as usize, f), labels[r as usize])),
    );
    scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if scratch[0].0 == scratch[scratch.len() - 1].0 {
        return;
    }
    let n = scratch.len() as u64;
    let mut left = vec![0u64; hist.len()];
    let mut right: Vec<u64> = hist.iter().map(|&c| c as u64).collect();
    let mut sq_left = 0u64;
    let mut sq_right: u64 = right.iter().map(|c| c * c).sum();
    for i in 0..scratch.len() - 1 {
        let c = scratch[i].1 as usize;
        sq_left += 2 * left[c] + 1;
        sq_right -= 2 * right[c] - 1;
        left[c] += 1;
        right[c] -= 1;
        let (a, b) = (scratch[i].0, scratch[i + 1].0);
        if a == b {
            continue;
        }
        let nl = (i + 1) as u64;
        let nr = n - nl;
        let score = sq_left as f64 / nl as f64 + sq_right as f64 / nr as f64;
        if best.is_none_or(|(s, _, _)| score > s) {
            *best = Some((score, f, midpoint(a, b)));
        }
    }
}

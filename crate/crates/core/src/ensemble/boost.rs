//! One-vs-rest gradient-boosted regression trees with squared loss.
//!
//! Class `k` is learned as a regressor on the indicator `y = [label == k]`.
//! Each iteration grows a shallow tree on the residuals of a fresh subsample
//! using variance-reduction splits, then sets every leaf to the mean residual
//! of *all* training rows reaching it. With that leaf rule a shrunken step can
//! only lower the full-set squared loss, so the per-class loss trace is
//! non-increasing.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{midpoint, DecisionTree, Node, RegressionTree};
use crate::error::{Error, Result};
use crate::features::TrainingSet;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostedTreesParams {
    pub n_iterations: usize,
    pub shrinkage: f64,
    pub subsample_fraction: f64,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for BoostedTreesParams {
    fn default() -> Self {
        BoostedTreesParams {
            n_iterations: 10_000,
            shrinkage: 0.01,
            subsample_fraction: 0.2,
            max_depth: 3,
            seed: 0,
        }
    }
}

impl BoostedTreesParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Parameter(format!(
                "shrinkage must be in (0, 1], got {}",
                self.shrinkage
            )));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Parameter(format!(
                "subsample_fraction must be in (0, 1], got {}",
                self.subsample_fraction
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::Parameter("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostedTrees {
    pub params: BoostedTreesParams,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Initial score per class.
    pub init: Vec<f64>,
    /// One tree sequence per class. Leaf values already include shrinkage.
    pub trees: Vec<Vec<RegressionTree>>,
}

impl BoostedTrees {
    /// Per-class scores, each summed in iteration order.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.init
            .iter()
            .zip(&self.trees)
            .map(|(&f0, seq)| seq.iter().fold(f0, |f, t| f + t.predict(x)))
            .collect()
    }
}

/// Full-set mean squared loss per class, one entry per state: the initial
/// score and then after every iteration.
pub type LossTrace = Vec<Vec<f64>>;

pub fn train_boosted_trees(ts: &TrainingSet, p: &BoostedTreesParams) -> Result<BoostedTrees> {
    train_boosted_trees_traced(ts, p).map(|(m, _)| m)
}

pub fn train_boosted_trees_traced(
    ts: &TrainingSet,
    p: &BoostedTreesParams,
) -> Result<(BoostedTrees, LossTrace)> {
    if ts.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    p.validate()?;
    let dim = ts.dim();
    if dim == 0 {
        return Err(Error::DimMismatch {
            expected: ts.spec.len(),
            got: 0,
        });
    }
    let n = ts.len();
    let order: Vec<Vec<u32>> = (0..dim)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                ts.value(a as usize, f)
                    .total_cmp(&ts.value(b as usize, f))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let per_class: Vec<(f64, Vec<RegressionTree>, Vec<f64>)> = (0..ts.n_classes)
        .into_par_iter()
        .map(|k| boost_class(ts, &order, k, p))
        .collect();
    let mut init = Vec::with_capacity(ts.n_classes);
    let mut trees = Vec::with_capacity(ts.n_classes);
    let mut trace = Vec::with_capacity(ts.n_classes);
    for (f0, seq, loss) in per_class {
        init.push(f0);
        trees.push(seq);
        trace.push(loss);
    }
    Ok((
        BoostedTrees {
            params: p.clone(),
            n_classes: ts.n_classes,
            feature_dim: dim,
            init,
            trees,
        },
        trace,
    ))
}

fn boost_class(
    ts: &TrainingSet,
    order: &[Vec<u32>],
    class: usize,
    p: &BoostedTreesParams,
) -> (f64, Vec<RegressionTree>, Vec<f64>) {
    let n = ts.len();
    let y: Vec<f64> = ts
        .labels()
        .iter()
        .map(|&l| if l as usize == class { 1.0 } else { 0.0 })
        .collect();
    let f0 = y.iter().sum::<f64>() / n as f64;
    let mut score = vec![f0; n];
    let mut residual: Vec<f64> = y.iter().map(|v| v - f0).collect();
    let loss = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut trace = Vec::with_capacity(p.n_iterations + 1);
    trace.push(loss(&residual));
    let m = ((p.subsample_fraction * n as f64).floor() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(p.n_iterations);
    let mut node_of = vec![u32::MAX; n];
    for it in 0..p.n_iterations {
        let mut rng = rng::stream(p.seed, ((class as u64) << 32) | it as u64);
        node_of.fill(u32::MAX);
        for i in sample(&mut rng, n, m) {
            node_of[i] = 0;
        }
        let tree = grow_regression_tree(ts, order, &residual, &mut node_of, p.max_depth);
        let n_leaves = tree.n_leaves();
        let mut sums = vec![0.0; n_leaves];
        let mut counts = vec![0usize; n_leaves];
        let leaf_of: Vec<usize> = (0..n).map(|i| tree.leaf_index(ts.row(i))).collect();
        for i in 0..n {
            sums[leaf_of[i]] += residual[i];
            counts[leaf_of[i]] += 1;
        }
        let values: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { p.shrinkage * (s / c as f64) })
            .collect();
        for i in 0..n {
            score[i] += values[leaf_of[i]];
            residual[i] = y[i] - score[i];
        }
        trace.push(loss(&residual));
        trees.push(RegressionTree { tree, values });
    }
    (f0, trees, trace)
}

#[derive(Clone, Copy)]
struct Stats {
    n: usize,
    sum: f64,
}

/// Level-wise exact greedy growth over presorted feature orders. Rows with
/// `node_of == u32::MAX` are outside the subsample; the others carry the id
/// of the node they currently sit in.
fn grow_regression_tree(
    ts: &TrainingSet,
    order: &[Vec<u32>],
    residual: &[f64],
    node_of: &mut [u32],
    max_depth: usize,
) -> DecisionTree {
    let mut nodes = vec![Node::Leaf { index: 0 }];
    let mut frontier: Vec<usize> = vec![0];
    for _ in 0..max_depth {
        let n_nodes = nodes.len();
        let mut total = vec![Stats { n: 0, sum: 0.0 }; n_nodes];
        for (i, &a) in node_of.iter().enumerate() {
            if a != u32::MAX {
                total[a as usize].n += 1;
                total[a as usize].sum += residual[i];
            }
        }
        // (gain, feature, threshold) per node
        let mut best: Vec<Option<(f64, usize, f64)>> = vec![None; n_nodes];
        let mut left = vec![Stats { n: 0, sum: 0.0 }; n_nodes];
        let mut last = vec![f64::NAN; n_nodes];
        for (f, ord) in order.iter().enumerate() {
            for &a in &frontier {
                left[a] = Stats { n: 0, sum: 0.0 };
            }
            for &i in ord {
                let a = node_of[i as usize];
                if a == u32::MAX {
                    continue;
                }
                let a = a as usize;
                let v = ts.value(i as usize, f);
                let l = left[a];
                if l.n > 0 && v > last[a] {
                    let t = total[a];
                    let nr = t.n - l.n;
                    let sr = t.sum - l.sum;
                    let gain = l.sum * l.sum / l.n as f64 + sr * sr / nr as f64
                        - t.sum * t.sum / t.n as f64;
                    if gain > 0.0 && best[a].is_none_or(|(g, _, _)| gain > g) {
                        best[a] = Some((gain, f, midpoint(last[a], v)));
                    }
                }
                left[a].n += 1;
                left[a].sum += residual[i as usize];
                last[a] = v;
            }
        }
        let mut next = Vec::new();
        let mut children = vec![None; n_nodes];
        for &a in &frontier {
            if let Some((_, feature, threshold)) = best[a] {
                let l = nodes.len();
                nodes.push(Node::Leaf { index: 0 });
                nodes.push(Node::Leaf { index: 0 });
                nodes[a] = Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: l as u32,
                    right: (l + 1) as u32,
                };
                children[a] = Some((feature, threshold, l));
                next.push(l);
                next.push(l + 1);
            }
        }
        if next.is_empty() {
            break;
        }
        for (i, a) in node_of.iter_mut().enumerate() {
            if *a == u32::MAX {
                continue;
            }
            if let Some((feature, threshold, l)) = children[*a as usize] {
                let go_left = ts.value(i, feature) <= threshold;
                *a = if go_left { l as u32 } else { (l + 1) as u32 };
            } else {
                // settled leaf: stop tracking
                *a = u32::MAX;
            }
        }
        frontier = next;
    }
    // number leaves in node order
    let mut leaf = 0u32;
    for node in nodes.iter_mut() {
        if let Node::Leaf { index } = node {
            *index = leaf;
            leaf += 1;
        }
    }
    DecisionTree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSpec;

    fn ts(rows: Vec<Vec<f64>>, labels: Vec<u8>) -> TrainingSet {
        let d = rows[0].len();
        TrainingSet::from_rows(FeatureSpec::patch([d, 1, 1]), 10, rows, labels).unwrap()
    }

    #[test]
    fn constant_target_needs_no_splits() {
        let t = ts((0..30).map(|i| vec![i as f64]).collect(), vec![3; 30]);
        let p = BoostedTreesParams {
            n_iterations: 5,
            ..Default::default()
        };
        let m = train_boosted_trees(&t, &p).unwrap();
        assert_eq!(m.init[3], 1.0);
        assert!(m.trees.iter().flatten().all(|t| t.tree.nodes.len() == 1));
    }

    #[test]
    fn depth_bounded_and_loss_monotone() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![(i * 37 % 200) as f64, (i % 7) as f64])
            .collect();
        let labels = rows.iter().map(|r| ((r[0] / 20.0) as u8).min(9)).collect();
        let p = BoostedTreesParams {
            n_iterations: 40,
            shrinkage: 0.3,
            subsample_fraction: 0.5,
            max_depth: 2,
            seed: 4,
        };
        let (m, trace) = train_boosted_trees_traced(&ts(rows, labels), &p).unwrap();
        assert!(m.trees.iter().flatten().all(|t| t.tree.depth() <= 2));
        for class in &trace {
            assert_eq!(class.len(), 41);
            for w in class.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert!(class[40] < class[0]);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let t = ts(vec![vec![0.0], vec![1.0]], vec![0, 1]);
        for p in [
            BoostedTreesParams { shrinkage: 0.0, ..Default::default() },
            BoostedTreesParams { shrinkage: 1.5, ..Default::default() },
            BoostedTreesParams { max_depth: 0, ..Default::default() },
            BoostedTreesParams { subsample_fraction: 0.0, ..Default::default() },
        ] {
            assert!(matches!(train_boosted_trees(&t, &p), Err(Error::Parameter(_))));
        }
    }
}

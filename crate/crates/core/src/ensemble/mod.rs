//! Tree-ensemble classifiers: a random forest grown to purity and one-vs-rest
//! gradient-boosted regression trees, plus a versioned binary model format.

mod boost;
mod forest;
mod tree;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

pub use boost::{train_boosted_trees, train_boosted_trees_traced, BoostedTrees, BoostedTreesParams, LossTrace};
pub use forest::{train_random_forest, RandomForest, RandomForestParams};
pub use tree::{ClassificationTree, DecisionTree, Node, RegressionTree};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleKind {
    RandomForest,
    BoostedTrees,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeEnsemble {
    RandomForest(RandomForest),
    BoostedTrees(BoostedTrees),
}

impl From<RandomForest> for TreeEnsemble {
    fn from(m: RandomForest) -> Self {
        TreeEnsemble::RandomForest(m)
    }
}

impl From<BoostedTrees> for TreeEnsemble {
    fn from(m: BoostedTrees) -> Self {
        TreeEnsemble::BoostedTrees(m)
    }
}

impl TreeEnsemble {
    pub fn kind(&self) -> EnsembleKind {
        match self {
            TreeEnsemble::RandomForest(_) => EnsembleKind::RandomForest,
            TreeEnsemble::BoostedTrees(_) => EnsembleKind::BoostedTrees,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            TreeEnsemble::RandomForest(m) => m.n_classes,
            TreeEnsemble::BoostedTrees(m) => m.n_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            TreeEnsemble::RandomForest(m) => m.feature_dim,
            TreeEnsemble::BoostedTrees(m) => m.feature_dim,
        }
    }

    pub fn n_trees(&self) -> usize {
        match self {
            TreeEnsemble::RandomForest(m) => m.trees.len(),
            TreeEnsemble::BoostedTrees(m) => m.trees.iter().map(Vec::len).sum(),
        }
    }

    /// Class prediction; the caller guarantees `x.len() == feature_dim`.
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> usize {
        match self {
            TreeEnsemble::RandomForest(m) => argmax(&m.votes(x)),
            TreeEnsemble::BoostedTrees(m) => argmax(&m.scores(x)),
        }
    }

    /// Predicts every row of a row-major block, walking tree by tree so each
    /// tree stays in cache. Votes and scores accumulate in the same order as
    /// single-row prediction, so results are identical.
    pub fn predict_rows(&self, rows: &[f64]) -> Result<Vec<usize>> {
        let dim = self.feature_dim();
        if !rows.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: rows.len() % dim,
            });
        }
        let n = rows.len() / dim;
        let row = |i: usize| &rows[i * dim..(i + 1) * dim];
        Ok(match self {
            TreeEnsemble::RandomForest(m) => {
                let k = m.n_classes;
                let mut votes = vec![0u64; n * k];
                for t in &m.trees {
                    for (i, v) in votes.chunks_exact_mut(k).enumerate() {
                        for (a, c) in v.iter_mut().zip(t.leaf_counts(row(i))) {
                            *a += *c as u64;
                        }
                    }
                }
                votes.chunks_exact(k).map(argmax).collect()
            }
            TreeEnsemble::BoostedTrees(m) => {
                let k = m.n_classes;
                let mut scores: Vec<f64> = (0..n).flat_map(|_| m.init.iter().copied()).collect();
                for (c, seq) in m.trees.iter().enumerate() {
                    for t in seq {
                        for i in 0..n {
                            scores[i * k + c] += t.predict(row(i));
                        }
                    }
                }
                scores.chunks_exact(k).map(argmax).collect()
            }
        })
    }
}

/// Index of the largest element; the first one wins ties.
fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_class(e: &TreeEnsemble, x: &[f64]) -> Result<usize> {
    if x.len() != e.feature_dim() {
        return Err(Error::DimMismatch {
            expected: e.feature_dim(),
            got: x.len(),
        });
    }
    Ok(e.predict_unchecked(x))
}

const MAGIC: &[u8; 4] = b"MSTE";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(e: &TreeEnsemble, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(e, &mut buf).map_err(|err| Error::io(path.as_ref(), err))?;
    crate::io::write_atomic(path.as_ref(), &buf)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TreeEnsemble> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let model = read_model(&mut r).map_err(|e| match e {
        ModelError::Io(err) => Error::corrupt(path, format!("truncated model: {err}")),
        ModelError::Invalid(reason) => Error::corrupt(path, reason),
        ModelError::Version(found) => Error::Version {
            expected: MODEL_VERSION,
            found,
        },
    })?;
    if !r.is_empty() {
        return Err(Error::corrupt(path, "trailing bytes after model"));
    }
    Ok(model)
}

pub fn write_model(e: &TreeEnsemble, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    w.write_u8(match e.kind() {
        EnsembleKind::RandomForest => 0,
        EnsembleKind::BoostedTrees => 1,
    })?;
    w.write_u32::<LittleEndian>(e.n_classes() as u32)?;
    w.write_u32::<LittleEndian>(e.feature_dim() as u32)?;
    match e {
        TreeEnsemble::RandomForest(m) => {
            let p = &m.params;
            w.write_u64::<LittleEndian>(p.n_trees as u64)?;
            w.write_f64::<LittleEndian>(p.subsample_fraction)?;
            w.write_u64::<LittleEndian>(p.features_per_split.map_or(0, |v| v as u64))?;
            w.write_u64::<LittleEndian>(p.max_depth.map_or(0, |v| v as u64))?;
            w.write_u64::<LittleEndian>(p.seed)?;
            w.write_u32::<LittleEndian>(m.trees.len() as u32)?;
            for t in &m.trees {
                write_nodes(&t.tree, w)?;
                w.write_u32::<LittleEndian>(t.counts.len() as u32)?;
                for c in &t.counts {
                    w.write_u32::<LittleEndian>(*c)?;
                }
            }
        }
        TreeEnsemble::BoostedTrees(m) => {
            let p = &m.params;
            w.write_u64::<LittleEndian>(p.n_iterations as u64)?;
            w.write_f64::<LittleEndian>(p.shrinkage)?;
            w.write_f64::<LittleEndian>(p.subsample_fraction)?;
            w.write_u64::<LittleEndian>(p.max_depth as u64)?;
            w.write_u64::<LittleEndian>(p.seed)?;
            for f0 in &m.init {
                w.write_f64::<LittleEndian>(*f0)?;
            }
            for seq in &m.trees {
                w.write_u32::<LittleEndian>(seq.len() as u32)?;
                for t in seq {
                    write_nodes(&t.tree, w)?;
                    w.write_u32::<LittleEndian>(t.values.len() as u32)?;
                    for v in &t.values {
                        w.write_f64::<LittleEndian>(*v)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn write_nodes(t: &DecisionTree, w: &mut impl Write) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(t.nodes.len() as u32)?;
    for n in &t.nodes {
        match *n {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                w.write_u8(0)?;
                w.write_u32::<LittleEndian>(feature)?;
                w.write_f64::<LittleEndian>(threshold)?;
                w.write_u32::<LittleEndian>(left)?;
                w.write_u32::<LittleEndian>(right)?;
            }
            Node::Leaf { index } => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(index)?;
            }
        }
    }
    Ok(())
}

enum ModelError {
    Io(std::io::Error),
    Invalid(String),
    Version(u32),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

fn invalid<T>(msg: impl Into<String>) -> std::result::Result<T, ModelError> {
    Err(ModelError::Invalid(msg.into()))
}

/// Upper bound on element counts read from a header before allocation, so a
/// corrupt length cannot trigger a huge allocation.
const MAX_COUNT: u32 = 1 << 28;

fn read_count(r: &mut impl Read) -> std::result::Result<usize, ModelError> {
    let n = r.read_u32::<LittleEndian>()?;
    if n > MAX_COUNT {
        return invalid(format!("implausible element count {n}"));
    }
    Ok(n as usize)
}

fn read_model(r: &mut impl Read) -> std::result::Result<TreeEnsemble, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return invalid("not a model file (bad magic)");
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MODEL_VERSION {
        return Err(ModelError::Version(version));
    }
    let kind = r.read_u8()?;
    let n_classes = r.read_u32::<LittleEndian>()? as usize;
    let feature_dim = r.read_u32::<LittleEndian>()? as usize;
    if n_classes == 0 || n_classes > 256 || feature_dim == 0 {
        return invalid(format!("bad header: {n_classes} classes, dim {feature_dim}"));
    }
    match kind {
        0 => {
            let n_trees = r.read_u64::<LittleEndian>()? as usize;
            let subsample_fraction = r.read_f64::<LittleEndian>()?;
            let fps = r.read_u64::<LittleEndian>()? as usize;
            let depth = r.read_u64::<LittleEndian>()? as usize;
            let seed = r.read_u64::<LittleEndian>()?;
            let params = RandomForestParams {
                n_trees,
                subsample_fraction,
                features_per_split: (fps > 0).then_some(fps),
                max_depth: (depth > 0).then_some(depth),
                seed,
            };
            let count = read_count(r)?;
            let mut trees = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let tree = read_nodes(r, feature_dim)?;
                let n_counts = read_count(r)?;
                if n_counts != tree.n_leaves() * n_classes {
                    return invalid("leaf count table does not match tree");
                }
                let mut counts = vec![0u32; n_counts];
                r.read_u32_into::<LittleEndian>(&mut counts)?;
                trees.push(ClassificationTree {
                    tree,
                    n_classes,
                    counts,
                });
            }
            if trees.is_empty() {
                return invalid("forest without trees");
            }
            Ok(TreeEnsemble::RandomForest(RandomForest {
                params,
                n_classes,
                feature_dim,
                trees,
            }))
        }
        1 => {
            let params = BoostedTreesParams {
                n_iterations: r.read_u64::<LittleEndian>()? as usize,
                shrinkage: r.read_f64::<LittleEndian>()?,
                subsample_fraction: r.read_f64::<LittleEndian>()?,
                max_depth: r.read_u64::<LittleEndian>()? as usize,
                seed: r.read_u64::<LittleEndian>()?,
            };
            let mut init = vec![0.0; n_classes];
            r.read_f64_into::<LittleEndian>(&mut init)?;
            let mut trees = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                let count = read_count(r)?;
                let mut seq = Vec::with_capacity(count.min(1 << 16));
                for _ in 0..count {
                    let tree = read_nodes(r, feature_dim)?;
                    let n_values = read_count(r)?;
                    if n_values != tree.n_leaves() {
                        return invalid("leaf value table does not match tree");
                    }
                    let mut values = vec![0.0; n_values];
                    r.read_f64_into::<LittleEndian>(&mut values)?;
                    seq.push(RegressionTree { tree, values });
                }
                trees.push(seq);
            }
            if init.iter().chain(trees.iter().flatten().flat_map(|t| &t.values)).any(|v| !v.is_finite()) {
                return invalid("non-finite boosted score");
            }
            Ok(TreeEnsemble::BoostedTrees(BoostedTrees {
                params,
                n_classes,
                feature_dim,
                init,
                trees,
            }))
        }
        k => invalid(format!("unknown ensemble kind {k}")),
    }
}

/// Reads a node array and checks it forms a single binary tree rooted at 0
/// whose leaves are numbered `0..n_leaves` without gaps.
fn read_nodes(r: &mut impl Read, feature_dim: usize) -> std::result::Result<DecisionTree, ModelError> {
    let n = read_count(r)?;
    if n == 0 {
        return invalid("empty tree");
    }
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        nodes.push(match r.read_u8()? {
            0 => Node::Split {
                feature: r.read_u32::<LittleEndian>()?,
                threshold: r.read_f64::<LittleEndian>()?,
                left: r.read_u32::<LittleEndian>()?,
                right: r.read_u32::<LittleEndian>()?,
            },
            1 => Node::Leaf {
                index: r.read_u32::<LittleEndian>()?,
            },
            t => return invalid(format!("unknown node tag {t}")),
        });
    }
    let mut parents = vec![0u32; n];
    let mut leaf_seen = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        match *node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if feature as usize >= feature_dim || !threshold.is_finite() {
                    return invalid(format!("node {i}: bad split"));
                }
                for c in [left, right] {
                    // children always follow their parent, which rules out cycles
                    if c as usize <= i || c as usize >= n {
                        return invalid(format!("node {i}: bad child {c}"));
                    }
                    parents[c as usize] += 1;
                }
            }
            Node::Leaf { index } => leaf_seen.push(index),
        }
    }
    if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
        return invalid("node array is not a tree");
    }
    leaf_seen.sort_unstable();
    if leaf_seen.iter().enumerate().any(|(i, &l)| l as usize != i) {
        return invalid("leaf indices are not 0..n_leaves");
    }
    Ok(DecisionTree { nodes })
}

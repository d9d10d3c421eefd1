//! Binary decision trees shared by both learners.

/// A tree node. Samples with `x[feature] <= threshold` go left.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        index: u32,
    },
}

/// Tree structure; leaf payloads live beside it, addressed by leaf index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    #[inline]
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut n = 0usize;
        loop {
            match self.nodes[n] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    n = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
                Node::Leaf { index } => return index as usize,
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, n: usize) -> usize {
            match t.nodes[n] {
                Node::Split { left, right, .. } => {
                    1 + walk(t, left as usize).max(walk(t, right as usize))
                }
                Node::Leaf { .. } => 0,
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(self, 0)
        }
    }
}

/// Classification tree with per-leaf class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationTree {
    pub tree: DecisionTree,
    pub n_classes: usize,
    /// `n_leaves * n_classes` counts, leaf-major.
    pub counts: Vec<u32>,
}

impl ClassificationTree {
    #[inline]
    pub fn leaf_counts(&self, x: &[f64]) -> &[u32] {
        let l = self.tree.leaf_index(x);
        &self.counts[l * self.n_classes..(l + 1) * self.n_classes]
    }
}

/// Regression tree with one value per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    pub tree: DecisionTree,
    pub values: Vec<f64>,
}

impl RegressionTree {
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.values[self.tree.leaf_index(x)]
    }
}

/// Split threshold between two distinct sorted values. The midpoint is used
/// unless rounding pushes it onto the upper value.
#[inline]
pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) * 0.5;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

//! Weighted CART over 8-bit code vectors.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::index::CodeBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// `code[dim] <= threshold` goes left, otherwise right.
    Split { dim: u16, threshold: u8, left: u32, right: u32 },
    /// `score` is the weighted positive fraction of the training rows that
    /// reached the leaf.
    Leaf { score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn leaf(&self, code: &[u8]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { score } => return score,
                TreeNode::Split { dim, threshold, left, right } => {
                    i = if code[dim as usize] <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    /// `(positive, score)` for one code vector.
    pub fn predict(&self, code: &[u8]) -> (bool, f64) {
        let score = self.leaf(code);
        (leaf_is_positive(score), score)
    }

    /// One box per positive leaf, with that leaf's score.
    pub fn positive_boxes(&self, dim: usize) -> Vec<(CodeBox, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, CodeBox::unbounded(dim))];
        while let Some((i, b)) = stack.pop() {
            match self.nodes[i] {
                TreeNode::Leaf { score } => {
                    if leaf_is_positive(score) {
                        out.push((b, score));
                    }
                }
                TreeNode::Split { dim: j, threshold, left, right } => {
                    let j = j as usize;
                    let mut rb = b.clone();
                    rb.lower[j] = rb.lower[j].max(threshold + 1);
                    let mut lb = b;
                    lb.upper[j] = lb.upper[j].min(threshold);
                    // Push right first so boxes come out in left-to-right leaf order.
                    if rb.lower[j] <= rb.upper[j] {
                        stack.push((right as usize, rb));
                    }
                    if lb.lower[j] <= lb.upper[j] {
                        stack.push((left as usize, lb));
                    }
                }
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(t, left as usize).max(walk(t, right as usize)),
            }
        }
        walk(self, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

/// Positive iff the weighted positive fraction is strictly above one half.
pub fn leaf_is_positive(score: f64) -> bool {
    score > 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    /// Features examined per node; `None` means all, in ascending order.
    pub max_features: Option<usize>,
}

/// Training rows viewed as parallel slices; `weights` already include any
/// bootstrap multiplicity.
pub(crate) struct TrainView<'a> {
    pub dim: usize,
    pub codes: &'a [u8],
    pub positive: &'a [bool],
    pub weights: &'a [f64],
}

impl TrainView<'_> {
    fn code(&self, i: usize) -> &[u8] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }
}

/// A chosen split, recorded for debugging and the weight-equivalence checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub dim: usize,
    pub threshold: u8,
    pub gain: f64,
}

pub(crate) fn grow(view: &TrainView<'_>, rows: Vec<usize>, params: &GrowParams, rng: &mut impl Rng) -> DecisionTree {
    let mut tree = DecisionTree { nodes: Vec::new() };
    grow_node(view, rows, 0, params, rng, &mut tree);
    tree
}

fn grow_node(
    view: &TrainView<'_>,
    rows: Vec<usize>,
    depth: usize,
    params: &GrowParams,
    rng: &mut impl Rng,
    tree: &mut DecisionTree,
) -> usize {
    let (pos, neg) = class_weights(view, &rows);
    let id = tree.nodes.len();
    tree.nodes.push(TreeNode::Leaf { score: if pos + neg > 0.0 { pos / (pos + neg) } else { 0.0 } });
    if depth >= params.max_depth || pos == 0.0 || neg == 0.0 || rows.len() < params.min_samples_split {
        return id;
    }
    let Some(split) = best_split(view, &rows, params, rng) else {
        return id;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&i| view.code(i)[split.dim] <= split.threshold);
    let left = grow_node(view, left_rows, depth + 1, params, rng, tree);
    let right = grow_node(view, right_rows, depth + 1, params, rng, tree);
    tree.nodes[id] = TreeNode::Split {
        dim: split.dim as u16,
        threshold: split.threshold,
        left: left as u32,
        right: right as u32,
    };
    id
}

fn class_weights(view: &TrainView<'_>, rows: &[usize]) -> (f64, f64) {
    rows.iter().fold((0.0, 0.0), |(p, n), &i| {
        if view.positive[i] {
            (p + view.weights[i], n)
        } else {
            (p, n + view.weights[i])
        }
    })
}

/// Weighted Gini impurity times node weight: `2pq / (p + q)`.
fn weighted_gini(p: f64, q: f64) -> f64 {
    let w = p + q;
    if w == 0.0 {
        0.0
    } else {
        2.0 * p * q / w
    }
}

/// Best split by weighted Gini decrease. Ties go to the lowest dimension, then
/// the lowest threshold.
pub(crate) fn best_split(
    view: &TrainView<'_>,
    rows: &[usize],
    params: &GrowParams,
    rng: &mut impl Rng,
) -> Option<SplitChoice> {
    let dims: Vec<usize> = match params.max_features {
        Some(m) if m < view.dim => {
            let mut d = index::sample(rng, view.dim, m.max(1)).into_vec();
            d.sort_unstable();
            d
        }
        _ => (0..view.dim).collect(),
    };
    let (pos, neg) = class_weights(view, rows);
    let parent = weighted_gini(pos, neg);
    let tol = 1e-12 * (pos + neg);
    let mut best: Option<SplitChoice> = None;
    let mut pos_hist = [0.0f64; 256];
    let mut neg_hist = [0.0f64; 256];
    let mut cnt_hist = [0usize; 256];
    for &j in &dims {
        pos_hist.fill(0.0);
        neg_hist.fill(0.0);
        cnt_hist.fill(0);
        for &i in rows {
            let v = view.code(i)[j] as usize;
            cnt_hist[v] += 1;
            if view.positive[i] {
                pos_hist[v] += view.weights[i];
            } else {
                neg_hist[v] += view.weights[i];
            }
        }
        let (mut lp, mut ln, mut lc) = (0.0, 0.0, 0usize);
        for t in 0..255usize {
            if cnt_hist[t] == 0 {
                continue;
            }
            lp += pos_hist[t];
            ln += neg_hist[t];
            lc += cnt_hist[t];
            let rc = rows.len() - lc;
            if rc == 0 {
                break;
            }
            if lc < params.min_samples_leaf || rc < params.min_samples_leaf {
                continue;
            }
            let gain = parent - weighted_gini(lp, ln) - weighted_gini(pos - lp, neg - ln);
            if gain > tol && best.is_none_or(|b| gain > b.gain + tol) {
                best = Some(SplitChoice { dim: j, threshold: t as u8, gain });
            }
        }
    }
    best
}

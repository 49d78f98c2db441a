//! Refinement classifiers trained on user feedback.
//!
//! Four kinds share one weighted CART learner:
//!
//! | kind               | members | resampling              | whole-catalog inference |
//! |--------------------|---------|-------------------------|-------------------------|
//! | `dbranch`          | 1       | none                    | k-d tree range queries  |
//! | `dbranch_ensemble` | 25      | bootstrap, all features | k-d tree range queries  |
//! | `dtree`            | 1       | none                    | full scan               |
//! | `rforest`          | 25      | bootstrap, √d′ features | full scan               |
//!
//! Box-capable models turn every positive leaf into an inclusive [`CodeBox`];
//! the union of those boxes is exactly the region the tree labels positive, so
//! a range query per box finds every positive row without touching the rest of
//! the catalog.

mod tree;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tree::{leaf_is_positive, DecisionTree, SplitChoice, TreeNode};

use crate::catalog::QuantizedCatalog;
use crate::error::{invalid, Error, Result};
use crate::index::{CodeBox, KdTree};
use tree::{GrowParams, TrainView};

pub const ENSEMBLE_MEMBERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dbranch,
    DbranchEnsemble,
    Dtree,
    Rforest,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Dbranch, Self::DbranchEnsemble, Self::Dtree, Self::Rforest];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dbranch => "dbranch",
            Self::DbranchEnsemble => "dbranch_ensemble",
            Self::Dtree => "dtree",
            Self::Rforest => "rforest",
        }
    }

    /// Whether positive regions can be extracted as boxes and served by the index.
    pub fn supports_boxes(self) -> bool {
        matches!(self, Self::Dbranch | Self::DbranchEnsemble)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "dbranch" => Ok(Self::Dbranch),
            "dbranch_ensemble" => Ok(Self::DbranchEnsemble),
            "dtree" => Ok(Self::Dtree),
            "rforest" => Ok(Self::Rforest),
            _ => Err(invalid(format!(
                "unknown model kind {s:?}; expected one of dbranch, dbranch_ensemble, dtree, rforest"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeHyper {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_samples_split: usize,
    /// Member count for the forest; the branch ensemble always uses 25.
    pub forest_members: usize,
    /// Features per split for the forest; `None` means `⌊√d′⌋`.
    pub forest_features: Option<usize>,
}

impl Default for TreeHyper {
    fn default() -> Self {
        Self {
            max_depth: 12,
            min_samples_leaf: 1,
            min_samples_split: 2,
            forest_members: ENSEMBLE_MEMBERS,
            forest_features: None,
        }
    }
}

/// Training rows: code vector, class, weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    codes: Vec<u8>,
    positive: Vec<bool>,
    weights: Vec<f64>,
}

impl LabeledSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, codes: Vec::new(), positive: Vec::new(), weights: Vec::new() }
    }

    pub fn push(&mut self, code: &[u8], positive: bool, weight: f64) -> Result<()> {
        if code.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: code.len() });
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(invalid(format!("sample weight must be finite and positive, got {weight}")));
        }
        self.codes.extend_from_slice(code);
        self.positive.push(positive);
        self.weights.push(weight);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn code(&self, i: usize) -> &[u8] {
        &self.codes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.positive[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn counts(&self) -> (usize, usize) {
        let p = self.positive.iter().filter(|&&p| p).count();
        (p, self.len() - p)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(invalid(format!(
                "training needs at least one positive and one negative example (got {p} positive, {n} negative)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub trees: Vec<DecisionTree>,
}

/// Rows classified positive, with scores, plus what it took to find them.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSet {
    /// `(row, score)`, descending score, ascending row on ties.
    pub hits: Vec<(usize, f64)>,
    /// Rows examined by the classifier: union of box hits, or the whole catalog for scans.
    pub candidates: usize,
    pub elapsed: Duration,
}

pub fn train(data: &LabeledSet, kind: ModelKind, seed: u64, hyper: &TreeHyper) -> Result<BranchModel> {
    data.validate()?;
    if hyper.min_samples_leaf == 0 {
        return Err(invalid("min_samples_leaf must be at least 1"));
    }
    let grow = |max_features: Option<usize>| GrowParams {
        max_depth: hyper.max_depth,
        min_samples_leaf: hyper.min_samples_leaf,
        min_samples_split: hyper.min_samples_split.max(2),
        max_features,
    };
    let full_view = TrainView { dim: data.dim, codes: &data.codes, positive: &data.positive, weights: &data.weights };
    let all_rows: Vec<usize> = (0..data.len()).collect();
    let trees = match kind {
        ModelKind::Dbranch | ModelKind::Dtree => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            vec![tree::grow(&full_view, all_rows, &grow(None), &mut rng)]
        }
        ModelKind::DbranchEnsemble => bagged(data, ENSEMBLE_MEMBERS, seed, &grow(None)),
        ModelKind::Rforest => {
            if hyper.forest_members == 0 {
                return Err(invalid("forest needs at least one member"));
            }
            let m = hyper
                .forest_features
                .unwrap_or_else(|| (data.dim as f64).sqrt().floor() as usize)
                .clamp(1, data.dim);
            bagged(data, hyper.forest_members, seed, &grow(Some(m)))
        }
    };
    Ok(BranchModel { kind, dim: data.dim, trees })
}

/// Bagged members. Every positive enters each member once; negatives are
/// bootstrap-resampled, and a negative drawn `c` times enters with weight
/// `c · w`, which is equivalent to replicating it `c` times in the split
/// criterion.
fn bagged(data: &LabeledSet, members: usize, seed: u64, params: &GrowParams) -> Vec<DecisionTree> {
    let n = data.len();
    let neg: Vec<usize> = (0..n).filter(|&i| !data.positive[i]).collect();
    (0..members)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64 + 1);
            let mut counts: Vec<u32> = data.positive.iter().map(|&p| p as u32).collect();
            for _ in 0..neg.len() {
                counts[neg[rng.random_range(0..neg.len())]] += 1;
            }
            let weights: Vec<f64> =
                data.weights.iter().zip(&counts).map(|(w, &c)| w * c as f64).collect();
            let rows: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
            let view = TrainView { dim: data.dim, codes: &data.codes, positive: &data.positive, weights: &weights };
            tree::grow(&view, rows, params, &mut rng)
        })
        .collect()
}

impl BranchModel {
    pub fn members(&self) -> usize {
        self.trees.len()
    }

    /// Single tree: its leaf class and positive fraction. Ensembles: strict
    /// majority vote, score = mean member score.
    pub fn predict_point(&self, code: &[u8]) -> (bool, f64) {
        if let [single] = self.trees.as_slice() {
            return single.predict(code);
        }
        let mut votes = 0usize;
        let mut total = 0.0;
        for t in &self.trees {
            let (p, s) = t.predict(code);
            votes += p as usize;
            total += s;
        }
        (2 * votes > self.trees.len(), total / self.trees.len() as f64)
    }

    /// Positive boxes of each member, with leaf scores.
    pub fn member_boxes(&self) -> Result<Vec<Vec<(CodeBox, f64)>>> {
        if !self.kind.supports_boxes() {
            return Err(Error::Unsupported(format!(
                "{} models are scan-only; positive boxes are only extracted from decision branches",
                self.kind
            )));
        }
        Ok(self.trees.iter().map(|t| t.positive_boxes(self.dim)).collect())
    }

    pub fn extract_positive_boxes(&self) -> Result<Vec<CodeBox>> {
        Ok(self.member_boxes()?.into_iter().flatten().map(|(b, _)| b).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn sort_hits(hits: &mut [(usize, f64)]) {
    hits.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Classifies the whole catalog through the index: range queries over every
/// member's positive boxes produce the candidates, which are then scored.
pub fn search_positives(model: &BranchModel, tree: &KdTree, catalog: &QuantizedCatalog) -> Result<PositiveSet> {
    let start = Instant::now();
    let member_boxes = model.member_boxes()?;
    if tree.len() != catalog.len() || tree.dim() != catalog.dim() || model.dim != catalog.dim() {
        return Err(invalid("model, index and catalog disagree on shape"));
    }
    let mut hits = Vec::new();
    let candidates;
    if let [boxes] = member_boxes.as_slice() {
        // Boxes of one tree are disjoint, so each hit is found exactly once
        // and already carries its leaf score.
        for (b, score) in boxes {
            tree.for_each_in_box(b, |row| hits.push((row, *score)))?;
        }
        candidates = hits.len();
    } else {
        let members = member_boxes.len();
        let mut votes = vec![0u16; catalog.len()];
        let mut touched = Vec::new();
        for boxes in &member_boxes {
            for (b, _) in boxes {
                tree.for_each_in_box(b, |row| {
                    if votes[row] == 0 {
                        touched.push(row);
                    }
                    votes[row] += 1;
                })?;
            }
        }
        candidates = touched.len();
        // Rows without a strict majority of member boxes cannot be positive.
        for row in touched {
            if 2 * votes[row] as usize > members {
                let (positive, score) = model.predict_point(catalog.code(row));
                if positive {
                    hits.push((row, score));
                }
            }
        }
    }
    sort_hits(&mut hits);
    Ok(PositiveSet { hits, candidates, elapsed: start.elapsed().max(Duration::from_nanos(1)) })
}

/// Classifies the whole catalog by evaluating the model on every row.
pub fn scan_positives(model: &BranchModel, catalog: &QuantizedCatalog) -> Result<PositiveSet> {
    let start = Instant::now();
    if model.dim != catalog.dim() {
        return Err(Error::DimensionMismatch { expected: catalog.dim(), found: model.dim });
    }
    let mut hits: Vec<(usize, f64)> = catalog
        .code_rows()
        .enumerate()
        .filter_map(|(row, code)| {
            let (positive, score) = model.predict_point(code);
            positive.then_some((row, score))
        })
        .collect();
    sort_hits(&mut hits);
    Ok(PositiveSet { hits, candidates: catalog.len(), elapsed: start.elapsed().max(Duration::from_nanos(1)) })
}

/// Index route for box-capable kinds, full scan otherwise.
pub fn classify_catalog(model: &BranchModel, tree: &KdTree, catalog: &QuantizedCatalog) -> Result<PositiveSet> {
    if model.kind.supports_boxes() {
        search_positives(model, tree, catalog)
    } else {
        scan_positives(model, catalog)
    }
}

/// Split chosen at the root for the given rows, exposed for split-trace checks.
pub fn root_split(data: &LabeledSet, hyper: &TreeHyper) -> Option<SplitChoice> {
    let view = TrainView { dim: data.dim, codes: &data.codes, positive: &data.positive, weights: &data.weights };
    let params = GrowParams {
        max_depth: hyper.max_depth,
        min_samples_leaf: hyper.min_samples_leaf,
        min_samples_split: hyper.min_samples_split.max(2),
        max_features: None,
    };
    let rows: Vec<usize> = (0..data.len()).collect();
    tree::best_split(&view, &rows, &params, &mut ChaCha8Rng::seed_from_u64(0))
}

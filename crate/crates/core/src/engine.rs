//! Search workflow: an initial nearest-neighbor query, then rounds of
//! relevance feedback where the user's labels (plus randomly sampled
//! negatives) train a classifier that is applied to the whole catalog.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogRecord, QuantizedCatalog};
use crate::error::{invalid, Error, Result};
use crate::head::HeadParams;
use crate::index::{KdTree, KnnMode};
use crate::models::{self, BranchModel, LabeledSet, ModelKind, TreeHyper};
use crate::quantizer::Quantizer;

/// Result count shown after the initial query.
pub const DEFAULT_INITIAL_K: usize = 60;
/// Leaf budget of the approximate initial search.
pub const DEFAULT_ANN_LEAVES: usize = 16;

/// Everything needed to serve one catalog.
#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub catalog: QuantizedCatalog,
    pub tree: KdTree,
    pub head: HeadParams,
    pub quantizer: Quantizer,
    pub ann_leaves: usize,
    row_of_id: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, catalog: QuantizedCatalog, tree: KdTree, head: HeadParams) -> Result<Self> {
        if tree.len() != catalog.len() || tree.dim() != catalog.dim() {
            return Err(invalid("index does not match catalog"));
        }
        if head.shape().output != catalog.dim() {
            return Err(Error::DimensionMismatch { expected: catalog.dim(), found: head.shape().output });
        }
        let quantizer = Quantizer::new(catalog.params.clone())?;
        let row_of_id = catalog.records.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        Ok(Self { name: name.into(), catalog, tree, head, quantizer, ann_leaves: DEFAULT_ANN_LEAVES, row_of_id })
    }

    pub fn len(&self) -> usize {
        self.catalog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.catalog.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.head.shape().input
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.row_of_id.get(&id).copied()
    }

    pub fn record(&self, row: usize) -> &CatalogRecord {
        &self.catalog.records[row]
    }

    /// Raw embedding → head → quantized code.
    pub fn embed_query(&self, query: &[f32]) -> Result<Vec<u8>> {
        if query.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: query.len() });
        }
        self.quantizer.encode(&self.head.forward(query)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<'a> {
    pub row: usize,
    pub record: &'a CatalogRecord,
    pub distance: f32,
}

pub fn initial_search<'a>(dataset: &'a Dataset, query: &[f32], k: usize, mode: KnnMode) -> Result<Vec<Neighbor<'a>>> {
    let code = dataset.embed_query(query)?;
    Ok(dataset
        .tree
        .knn(&code, k, mode)?
        .into_iter()
        .map(|n| Neighbor { row: n.row, record: dataset.record(n.row), distance: n.distance })
        .collect())
}

/// Uniform sample without replacement of `count` rows from `0..n` minus
/// `exclude`. Returns the rows and whether `count` had to be clamped.
pub fn sample_negatives(n: usize, exclude: &HashSet<usize>, count: usize, seed: u64) -> (Vec<usize>, bool) {
    let mut excluded: Vec<usize> = exclude.iter().copied().filter(|&r| r < n).collect();
    excluded.sort_unstable();
    let eligible = n - excluded.len();
    let take = count.min(eligible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = index::sample(&mut rng, eligible, take)
        .into_iter()
        .map(|mut r| {
            // The k-th eligible row skips every excluded row at or below it.
            for &e in &excluded {
                if e <= r {
                    r += 1;
                } else {
                    break;
                }
            }
            r
        })
        .collect();
    rows.sort_unstable();
    (rows, take < count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgement {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub dataset: String,
    /// Record id → latest judgement.
    pub labels: BTreeMap<u64, Judgement>,
    pub last_model: Option<BranchModel>,
    pub iteration: u32,
}

impl Session {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self { id: id.into(), dataset: dataset.into(), labels: BTreeMap::new(), last_model: None, iteration: 0 }
    }

    /// Merges new labels; a relabeled item keeps its newest judgement.
    pub fn apply_labels(&mut self, dataset: &Dataset, labels: &[(u64, Judgement)]) -> Result<()> {
        if let Some((id, _)) = labels.iter().find(|(id, _)| dataset.row_of(*id).is_none()) {
            return Err(Error::NotFound(format!("record {id} is not in dataset {}", dataset.name)));
        }
        for &(id, j) in labels {
            self.labels.insert(id, j);
        }
        Ok(())
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let p = self.labels.values().filter(|&&j| j == Judgement::Positive).count();
        (p, self.labels.len() - p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParams {
    pub model_kind: ModelKind,
    pub negative_samples: usize,
    /// Weight of user-labeled negatives; positives and random negatives weigh 1.
    pub negative_weight: f64,
    pub seed: u64,
    pub max_results: usize,
    pub hyper: TreeHyper,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Dbranch,
            negative_samples: 1000,
            negative_weight: 10.0,
            seed: 0,
            max_results: 500,
            hyper: TreeHyper::default(),
        }
    }
}

impl FinetuneParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.negative_weight.is_finite() && self.negative_weight > 0.0) {
            return Err(invalid(format!("negative_weight must be positive, got {}", self.negative_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub train_ms: f64,
    pub query_ms: f64,
    pub n_candidates: usize,
    pub n_positives: usize,
    pub model_kind: ModelKind,
    pub iteration: u32,
    pub labeled_positives: usize,
    pub labeled_negatives: usize,
    pub random_negatives: usize,
    /// Set when fewer unlabeled rows existed than negatives were requested.
    pub negatives_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub row: usize,
    pub id: u64,
    pub uri: String,
    pub score: f64,
}

/// Training rows for the current session state.
pub fn build_training_set(dataset: &Dataset, session: &Session, params: &FinetuneParams) -> Result<(LabeledSet, usize, bool)> {
    let (pos, neg) = session.label_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(format!(
            "label at least one positive and one negative result before fine-tuning (have {pos} positive, {neg} negative)"
        )));
    }
    let mut set = LabeledSet::new(dataset.catalog.dim());
    let mut labeled_rows = HashSet::with_capacity(session.labels.len());
    for (&id, &j) in &session.labels {
        let row = dataset
            .row_of(id)
            .ok_or_else(|| Error::NotFound(format!("record {id} is not in dataset {}", dataset.name)))?;
        labeled_rows.insert(row);
        let (positive, weight) = match j {
            Judgement::Positive => (true, 1.0),
            Judgement::Negative => (false, params.negative_weight),
        };
        set.push(dataset.catalog.code(row), positive, weight)?;
    }
    let (random, clamped) = sample_negatives(dataset.len(), &labeled_rows, params.negative_samples, params.seed);
    for &row in &random {
        set.push(dataset.catalog.code(row), false, 1.0)?;
    }
    Ok((set, random.len(), clamped))
}

/// One refinement round: train on the session's labels, classify the whole
/// catalog and return the unlabeled positives, best first.
pub fn finetune(dataset: &Dataset, session: &mut Session, params: &FinetuneParams) -> Result<(Vec<RankedResult>, SearchStats)> {
    params.validate()?;
    if session.dataset != dataset.name {
        return Err(invalid(format!("session belongs to dataset {}, not {}", session.dataset, dataset.name)));
    }
    let train_start = Instant::now();
    let (set, random_negatives, negatives_clamped) = build_training_set(dataset, session, params)?;
    let model = models::train(&set, params.model_kind, params.seed, &params.hyper)?;
    let train_ms = train_start.elapsed().as_secs_f64() * 1e3;

    let positives = models::classify_catalog(&model, &dataset.tree, &dataset.catalog)?;
    let query_ms = positives.elapsed.as_secs_f64() * 1e3;

    let results: Vec<RankedResult> = positives
        .hits
        .iter()
        .filter(|(row, _)| !session.labels.contains_key(&dataset.record(*row).id))
        .take(params.max_results)
        .map(|&(row, score)| {
            let r = dataset.record(row);
            RankedResult { row, id: r.id, uri: r.uri.clone(), score }
        })
        .collect();

    session.iteration += 1;
    session.last_model = Some(model);
    let (labeled_positives, labeled_negatives) = session.label_counts();
    let stats = SearchStats {
        train_ms,
        query_ms,
        n_candidates: positives.candidates,
        n_positives: positives.hits.len(),
        model_kind: params.model_kind,
        iteration: session.iteration,
        labeled_positives,
        labeled_negatives,
        random_negatives,
        negatives_clamped,
    };
    Ok((results, stats))
}

/// Sessions shared across request handlers. Each session has its own lock so
/// fine-tune rounds on one session run one at a time.
#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: Mutex<u64>,
}

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a session with a fresh opaque id.
    pub fn create(&self, dataset: &str) -> Arc<Mutex<Session>> {
        let id = {
            let mut c = self.counter.lock().unwrap_or_else(|e| e.into_inner());
            *c += 1;
            format!("s{:x}-{:016x}", *c, rand::random::<u64>())
        };
        let session = Arc::new(Mutex::new(Session::new(id.clone(), dataset)));
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id, session.clone());
        session
    }

    pub fn get(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn lock_session(session: &Mutex<Session>) -> MutexGuard<'_, Session> {
    session.lock().unwrap_or_else(|e| e.into_inner())
}

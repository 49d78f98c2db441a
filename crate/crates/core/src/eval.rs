//! Evaluation procedures: Recall@k under quantization, the nearest-neighbor
//! classification baseline, the model/baseline F1 crossover experiment and
//! zero-shot accuracy. Every metric here has a brute-force test oracle.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{EmbeddingMatrix, QuantizedCatalog};
use crate::error::{invalid, Error, Result};
use crate::head::{train_head, HeadParams, TrainConfig};
use crate::models::{scan_positives, train, LabeledSet, ModelKind, TreeHyper};
use crate::quantizer::Quantizer;
use crate::synth::{records, PairGenerator, PairsConfig};

/// `k` smallest `(distance, index)` pairs in ascending order, ties by index.
fn top_k(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<usize> {
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn code_sq_dist(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).pow(2) as u32).sum()
}

/// Decodes every catalog row to `f64`, row-major.
pub fn decode_catalog(catalog: &QuantizedCatalog) -> Result<Vec<f64>> {
    let q = Quantizer::new(catalog.params.clone())?;
    let mut out = Vec::with_capacity(catalog.codes.len());
    for code in catalog.code_rows() {
        out.extend(q.decode(code)?.into_iter().map(f64::from));
    }
    Ok(out)
}

fn neighbors_excluding_self(data: &[f64], d: usize, q: usize, k: usize) -> Vec<usize> {
    let query = &data[q * d..(q + 1) * d];
    let scored = data
        .chunks_exact(d)
        .enumerate()
        .filter(|&(i, _)| i != q)
        .map(|(i, row)| (sq_dist(query, row), i))
        .collect();
    top_k(scored, k)
}

fn check_recall_inputs(reference: &EmbeddingMatrix, candidate: &QuantizedCatalog, queries: &[usize], k: usize) -> Result<()> {
    let n = reference.n();
    if candidate.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: candidate.len() });
    }
    if k == 0 || k >= n {
        return Err(invalid(format!("k must be in 1..{n}, got {k}")));
    }
    if queries.is_empty() {
        return Err(invalid("no query rows"));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= n) {
        return Err(invalid(format!("query row {q} out of range for {n} rows")));
    }
    Ok(())
}

/// Mean over `queries` of `|top-k(candidate) ∩ top-k(reference)| / k`, both
/// neighbor lists computed by brute force with the query row excluded.
pub fn recall_at_k(reference: &EmbeddingMatrix, candidate: &QuantizedCatalog, queries: &[usize], k: usize) -> Result<f64> {
    Ok(recall_at_ks(reference, candidate, queries, &[k])?[0])
}

/// [`recall_at_k`] for several `k` in one pass.
pub fn recall_at_ks(reference: &EmbeddingMatrix, candidate: &QuantizedCatalog, queries: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let kmax = ks.iter().copied().max().ok_or_else(|| invalid("no k values"))?;
    for &k in ks {
        check_recall_inputs(reference, candidate, queries, k)?;
    }
    let ref_data: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let cand_data = decode_catalog(candidate)?;
    let mut sums = vec![0.0; ks.len()];
    for &q in queries {
        let r = neighbors_excluding_self(&ref_data, reference.d(), q, kmax);
        let c = neighbors_excluding_self(&cand_data, candidate.dim(), q, kmax);
        for (s, &k) in sums.iter_mut().zip(ks) {
            let truth: HashSet<usize> = r[..k].iter().copied().collect();
            *s += c[..k].iter().filter(|i| truth.contains(i)).count() as f64 / k as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / queries.len() as f64).collect())
}

/// F1 of a predicted row set against a boolean ground truth. An empty
/// prediction against an empty truth counts as perfect.
pub fn f1_score(predicted: &BTreeSet<usize>, truth: &[bool]) -> f64 {
    let tp = predicted.iter().filter(|&&r| truth[r]).count();
    let fp = predicted.len() - tp;
    let fneg = truth.iter().filter(|&&t| t).count() - tp;
    if tp + fp + fneg == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

fn class_truth(test: &QuantizedCatalog, target_class: i64) -> Result<Vec<bool>> {
    test.records
        .iter()
        .map(|r| r.label.map(|l| l == target_class).ok_or_else(|| invalid(format!("record {} has no label", r.id))))
        .collect()
}

/// Predicted positives of the nearest-neighbor baseline: the union of the
/// `k`-NN of each training positive in `test`, `k` = true positive count.
pub fn nn_baseline_predictions(train_positives: &[&[u8]], test: &QuantizedCatalog, target_class: i64) -> Result<BTreeSet<usize>> {
    if train_positives.is_empty() {
        return Err(invalid("the baseline needs at least one training positive"));
    }
    let truth = class_truth(test, target_class)?;
    let k = truth.iter().filter(|&&t| t).count();
    if k == 0 {
        return Err(Error::Validation(format!("class {target_class} does not occur in the test set")));
    }
    let mut predicted = BTreeSet::new();
    for p in train_positives {
        if p.len() != test.dim() {
            return Err(Error::DimensionMismatch { expected: test.dim(), found: p.len() });
        }
        let scored = test.code_rows().enumerate().map(|(i, c)| (code_sq_dist(p, c) as f64, i)).collect();
        predicted.extend(top_k(scored, k));
    }
    Ok(predicted)
}

pub fn nn_baseline_f1(train_positives: &[&[u8]], test: &QuantizedCatalog, target_class: i64) -> Result<f64> {
    let predicted = nn_baseline_predictions(train_positives, test, target_class)?;
    Ok(f1_score(&predicted, &class_truth(test, target_class)?))
}

/// Fraction of rows whose most cosine-similar class embedding, after
/// decoding, carries the row's label. Ties go to the lowest class.
pub fn zero_shot_accuracy(image_codes: &QuantizedCatalog, class_embeddings: &BTreeMap<i64, Vec<u8>>) -> Result<f64> {
    if image_codes.is_empty() {
        return Err(invalid("empty catalog"));
    }
    let q = Quantizer::new(image_codes.params.clone())?;
    let unit = |code: &[u8]| -> Result<Vec<f64>> {
        let v: Vec<f64> = q.decode(code)?.into_iter().map(f64::from).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(if norm > 0.0 { v.into_iter().map(|x| x / norm).collect() } else { v })
    };
    let classes: Vec<(i64, Vec<f64>)> =
        class_embeddings.iter().map(|(&c, code)| Ok((c, unit(code)?))).collect::<Result<_>>()?;
    let mut correct = 0usize;
    for (row, code) in image_codes.code_rows().enumerate() {
        let label = image_codes.records[row]
            .label
            .ok_or_else(|| invalid(format!("record {} has no label", image_codes.records[row].id)))?;
        if !class_embeddings.contains_key(&label) {
            return Err(Error::Validation(format!("no class embedding for label {label}")));
        }
        let v = unit(code)?;
        let mut best = (f64::NEG_INFINITY, i64::MIN);
        for (c, e) in &classes {
            let sim: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
            if sim > best.0 {
                best = (sim, *c);
            }
        }
        correct += (best.1 == label) as usize;
    }
    Ok(correct as f64 / image_codes.len() as f64)
}

/// Catalog restricted to `rows`, in the given order.
pub fn subset(catalog: &QuantizedCatalog, rows: &[usize]) -> Result<QuantizedCatalog> {
    let mut codes = Vec::with_capacity(rows.len() * catalog.dim());
    for &r in rows {
        codes.extend_from_slice(catalog.code(r));
    }
    let recs = rows.iter().map(|&r| catalog.records[r].clone()).collect();
    QuantizedCatalog::new(catalog.params.clone(), codes, recs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverConfig {
    /// Positive-count schedule, ascending, starting at 1.
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Negatives drawn per seed from the training split.
    pub negative_samples: usize,
    /// Draw negatives from every training row not chosen as a positive, as
    /// the engine does with unlabeled rows, instead of from other classes only.
    pub noisy_negatives: bool,
    pub test_fraction: f64,
    /// Weights positives by `negatives / positives` so both classes carry
    /// equal total weight.
    pub balance_classes: bool,
    pub hyper: TreeHyper,
}

impl Default for CrossoverConfig {
    fn default() -> Self {
        Self {
            counts: (1..=30).collect(),
            seeds: (0..10).collect(),
            negative_samples: 1000,
            noisy_negatives: false,
            test_fraction: 0.5,
            balance_classes: true,
            hyper: TreeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossoverRow {
    pub n_positives: usize,
    pub f1_model: f64,
    pub f1_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossoverResult {
    pub model_kind: ModelKind,
    pub rows: Vec<CrossoverRow>,
    /// Smallest positive count where the mean model F1 beats the baseline.
    pub crossover: Option<usize>,
}

struct SeedRun {
    model: Vec<f64>,
    baseline: Vec<f64>,
}

fn crossover_seed(catalog: &QuantizedCatalog, kind: ModelKind, cfg: &CrossoverConfig, seed: u64) -> Result<SeedRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..catalog.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((catalog.len() as f64) * cfg.test_fraction).round() as usize;
    let (test_rows, train_rows) = order.split_at(n_test);
    let test = subset(catalog, test_rows)?;

    let classes: BTreeSet<i64> = catalog.records.iter().filter_map(|r| r.label).collect();
    let classes: Vec<i64> = classes.into_iter().collect();
    let target = *classes.choose(&mut rng).ok_or_else(|| invalid("catalog has no labels"))?;
    let label = |r: usize| catalog.records[r].label;
    let positives: Vec<usize> = train_rows.iter().copied().filter(|&r| label(r) == Some(target)).collect();
    let max_count = cfg.counts.iter().copied().max().unwrap_or(0);
    if positives.len() < max_count {
        return Err(Error::Validation(format!(
            "class {target} has {} training rows, fewer than the {max_count} positives requested",
            positives.len()
        )));
    }
    let chosen_max: HashSet<usize> = positives[..max_count].iter().copied().collect();
    let mut others: Vec<usize> = train_rows
        .iter()
        .copied()
        .filter(|&r| if cfg.noisy_negatives { !chosen_max.contains(&r) } else { label(r) != Some(target) })
        .collect();
    others.shuffle(&mut rng);
    others.truncate(cfg.negative_samples);
    if others.is_empty() {
        return Err(Error::Validation("no negatives available outside the target class".into()));
    }
    let truth = class_truth(&test, target)?;

    let mut run = SeedRun { model: Vec::new(), baseline: Vec::new() };
    for &p in &cfg.counts {
        let chosen = &positives[..p];
        let mut set = LabeledSet::new(catalog.dim());
        let w_pos = if cfg.balance_classes { others.len() as f64 / p as f64 } else { 1.0 };
        for &r in chosen {
            set.push(catalog.code(r), true, w_pos)?;
        }
        for &r in &others {
            set.push(catalog.code(r), false, 1.0)?;
        }
        let model = train(&set, kind, seed, &cfg.hyper)?;
        let predicted: BTreeSet<usize> = scan_positives(&model, &test)?.hits.into_iter().map(|(r, _)| r).collect();
        run.model.push(f1_score(&predicted, &truth));
        let codes: Vec<&[u8]> = chosen.iter().map(|&r| catalog.code(r)).collect();
        run.baseline.push(nn_baseline_f1(&codes, &test, target)?);
    }
    Ok(run)
}

/// For each positive count, trains `kind` on that many positives of a
/// randomly chosen class plus sampled negatives, then compares its held-out
/// F1 with the nearest-neighbor baseline given the same positives. Seeds run
/// in parallel; results are reduced in seed order.
pub fn crossover_experiment(catalog: &QuantizedCatalog, kind: ModelKind, cfg: &CrossoverConfig) -> Result<CrossoverResult> {
    if cfg.counts.is_empty() || cfg.counts.contains(&0) {
        return Err(invalid("positive counts must be non-empty and start at 1"));
    }
    if !cfg.counts.windows(2).all(|w| w[0] < w[1]) {
        return Err(invalid("positive counts must be strictly ascending"));
    }
    if cfg.seeds.is_empty() {
        return Err(invalid("at least one seed is required"));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(invalid("test_fraction must lie in (0, 1)"));
    }
    let runs: Vec<Result<SeedRun>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            cfg.seeds.iter().map(|&seed| s.spawn(move || crossover_seed(catalog, kind, cfg, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("crossover worker panicked")).collect()
    });
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;
    let m = runs.len() as f64;
    let rows: Vec<CrossoverRow> = cfg
        .counts
        .iter()
        .enumerate()
        .map(|(i, &p)| CrossoverRow {
            n_positives: p,
            f1_model: runs.iter().map(|r| r.model[i]).sum::<f64>() / m,
            f1_baseline: runs.iter().map(|r| r.baseline[i]).sum::<f64>() / m,
        })
        .collect();
    let crossover = rows.iter().find(|r| r.f1_model > r.f1_baseline).map(|r| r.n_positives);
    Ok(CrossoverResult { model_kind: kind, rows, crossover })
}

pub fn write_crossover_csv(result: &CrossoverResult, w: &mut dyn Write) -> Result<()> {
    writeln!(w, "model,n_positives,f1_model,f1_baseline")?;
    for r in &result.rows {
        writeln!(w, "{},{},{:.6},{:.6}", result.model_kind, r.n_positives, r.f1_model, r.f1_baseline)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    RandomHead,
    Head,
    HeadKoleo,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 3] = [Self::RandomHead, Self::Head, Self::HeadKoleo];
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomHead => "random_head",
            Self::Head => "head",
            Self::HeadKoleo => "head_koleo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallSuiteConfig {
    pub pairs: PairsConfig,
    pub train_pairs: usize,
    pub eval_items: usize,
    pub queries: usize,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template for both trained variants; `koleo_weight` is forced to 0 for
    /// the plain head.
    pub train: TrainConfig,
}

impl Default for RecallSuiteConfig {
    fn default() -> Self {
        Self {
            pairs: PairsConfig::default(),
            train_pairs: 4096,
            eval_items: 4000,
            queries: 200,
            ks: vec![1, 10, 100],
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub variant: HeadVariant,
    pub seed: u64,
    /// `(k, recall)` in the configured order.
    pub recall: Vec<(usize, f64)>,
    pub zero_shot: f64,
}

/// Quantized catalog of the rows of `z`, with the quantizer fitted on them.
pub fn quantize_fitted(z: &EmbeddingMatrix, labels: Option<&[i64]>) -> Result<(QuantizedCatalog, Quantizer)> {
    let q = Quantizer::fit(z)?;
    let codes = q.encode_matrix(z)?;
    let cat = QuantizedCatalog::new(q.params().clone(), codes, records(z.n(), labels))?;
    Ok((cat, q))
}

fn recall_for_head(head: &HeadParams, variant: HeadVariant, seed: u64, cfg: &RecallSuiteConfig, eval: &EvalSet) -> Result<RecallRow> {
    let z = head.forward_matrix(&eval.items)?;
    let (cat, q) = quantize_fitted(&z, Some(&eval.labels))?;
    let recalls = recall_at_ks(&z, &cat, &eval.queries, &cfg.ks)?;
    let mut class_codes = BTreeMap::new();
    for (c, p) in eval.prototypes.iter().enumerate() {
        class_codes.insert(c as i64, q.encode(&head.forward(p)?)?);
    }
    Ok(RecallRow {
        variant,
        seed,
        recall: cfg.ks.iter().copied().zip(recalls).collect(),
        zero_shot: zero_shot_accuracy(&cat, &class_codes)?,
    })
}

struct EvalSet {
    items: EmbeddingMatrix,
    labels: Vec<i64>,
    queries: Vec<usize>,
    prototypes: Vec<Vec<f32>>,
}

/// Recall@k of each head's float-output neighbors recovered after 8-bit
/// quantization of that output, for an untrained head, a head trained
/// without KoLeo and one trained with it.
/// Zero-shot accuracy uses the class prototypes as class embeddings.
pub fn recall_suite(cfg: &RecallSuiteConfig) -> Result<Vec<RecallRow>> {
    if cfg.queries == 0 || cfg.queries > cfg.eval_items {
        return Err(invalid("queries must be in 1..=eval_items"));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut gen = PairGenerator::new(PairsConfig { seed, ..cfg.pairs });
        let train_set = gen.draw(cfg.train_pairs)?;
        let eval_draw = gen.draw(cfg.eval_items)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut queries: Vec<usize> = (0..cfg.eval_items).collect();
        queries.shuffle(&mut rng);
        queries.truncate(cfg.queries);
        let eval = EvalSet { items: eval_draw.a, labels: eval_draw.labels, queries, prototypes: eval_draw.prototypes };

        let base = TrainConfig { shape: cfg.train.shape, seed, ..cfg.train };
        for variant in HeadVariant::ALL {
            let head = match variant {
                HeadVariant::RandomHead => HeadParams::init(base.shape, seed),
                HeadVariant::Head => train_head(&train_set.a, &train_set.b, &TrainConfig { koleo_weight: 0.0, ..base })?.0,
                HeadVariant::HeadKoleo => train_head(&train_set.a, &train_set.b, &base)?.0,
            };
            rows.push(recall_for_head(&head, variant, seed, cfg, &eval)?);
        }
    }
    Ok(rows)
}

/// Mean recall per k and mean zero-shot accuracy per variant.
pub fn summarize_recall(rows: &[RecallRow]) -> BTreeMap<HeadVariant, (Vec<(usize, f64)>, f64)> {
    type Acc = (Vec<(usize, f64)>, f64, usize);
    let mut out: BTreeMap<HeadVariant, Acc> = BTreeMap::new();
    for r in rows {
        let e = out.entry(r.variant).or_insert_with(|| (r.recall.iter().map(|&(k, _)| (k, 0.0)).collect(), 0.0, 0));
        for (acc, &(_, v)) in e.0.iter_mut().zip(&r.recall) {
            acc.1 += v;
        }
        e.1 += r.zero_shot;
        e.2 += 1;
    }
    out.into_iter()
        .map(|(v, (rec, zs, n))| {
            let n = n as f64;
            (v, (rec.into_iter().map(|(k, s)| (k, s / n)).collect(), zs / n))
        })
        .collect()
}

pub fn write_recall_csv(rows: &[RecallRow], w: &mut dyn Write) -> Result<()> {
    let ks: Vec<usize> = rows.first().map(|r| r.recall.iter().map(|&(k, _)| k).collect()).unwrap_or_default();
    write!(w, "variant,seed")?;
    for k in &ks {
        write!(w, ",recall_at_{k}")?;
    }
    writeln!(w, ",zero_shot")?;
    for r in rows {
        write!(w, "{},{}", r.variant, r.seed)?;
        for (_, v) in &r.recall {
            write!(w, ",{v:.6}")?;
        }
        writeln!(w, ",{:.6}", r.zero_shot)?;
    }
    Ok(())
}

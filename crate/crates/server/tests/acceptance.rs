//! Acceptance checks for the retrieval core and the HTTP service.
//!
//! Run with `cargo test --release --test acceptance`. Pass criterion numbers
//! (`-- 3 4`) to run a subset. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use sbc_core::catalog::{header_len, write_catalog, EmbeddingMatrix, QuantizationParams, QuantizedCatalog};
use sbc_core::eval::{crossover_experiment, recall_suite, summarize_recall, CrossoverConfig, HeadVariant, RecallSuiteConfig};
use sbc_core::head::{HeadParams, HeadShape};
use sbc_core::index::{CodeBox, KdTree, KnnMode};
use sbc_core::koleo::{koleo_grad, koleo_loss};
use sbc_core::models::{scan_positives, search_positives, train, LabeledSet, ModelKind, TreeHyper};
use sbc_core::quantizer::Quantizer;
use sbc_core::synth::{code_space_catalog, labeled_cluster_catalog, records, ClusterConfig};
use sbc_server::toy;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn sq_dist(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(&x, &y)| (x as i32 - y as i32).pow(2) as u32).sum()
}

fn random_catalog(n: usize, dim: usize, rng: &mut impl Rng) -> QuantizedCatalog {
    let codes: Vec<u8> = (0..n * dim).map(|_| rng.random()).collect();
    let params = QuantizationParams::new(vec![0.0; dim], vec![1.0; dim]).unwrap();
    QuantizedCatalog::new(params, codes, records(n, None)).unwrap()
}

/// Positives are the `p` rows nearest to a random anchor within a random
/// sample; negatives are random rows.
fn local_labeled_set(cat: &QuantizedCatalog, p: usize, neg: usize, neg_weight: f64, rng: &mut impl Rng) -> LabeledSet {
    let n = cat.len();
    let anchor = cat.code(rng.random_range(0..n)).to_vec();
    let mut pool: Vec<usize> = (0..(50 * p).min(n).max(p)).map(|_| rng.random_range(0..n)).collect();
    pool.sort_by_key(|&r| (sq_dist(cat.code(r), &anchor), r));
    pool.dedup();
    let positives: BTreeSet<usize> = pool.into_iter().take(p).collect();
    let mut set = LabeledSet::new(cat.dim());
    for &r in &positives {
        set.push(cat.code(r), true, 1.0).unwrap();
    }
    let mut added = 0;
    while added < neg {
        let r = rng.random_range(0..n);
        if !positives.contains(&r) {
            set.push(cat.code(r), false, neg_weight).unwrap();
            added += 1;
        }
    }
    set
}

fn rows(hits: &[(usize, f64)]) -> BTreeSet<usize> {
    hits.iter().map(|h| h.0).collect()
}

fn c1_index_scan_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut total_hits = 0usize;
    let hyper = TreeHyper::default();
    for trial in 0..100 {
        let n = rng.random_range(1_000..=100_000);
        let clusters = rng.random_range(1..=64);
        let spread = rng.random_range(2.0..25.0);
        let cat = code_space_catalog(n, 32, clusters, spread, trial).map_err(e)?;
        let tree = KdTree::build(&cat, rng.random_range(8..=64)).map_err(e)?;
        let p = rng.random_range(1..=60);
        let neg = rng.random_range(1..=200 - p);
        let weight = [1.0, 2.0, 10.0][rng.random_range(0..3)];
        let data = local_labeled_set(&cat, p, neg, weight, &mut rng);
        for kind in [ModelKind::Dbranch, ModelKind::DbranchEnsemble] {
            let model = train(&data, kind, trial, &hyper).map_err(e)?;
            let via_index = search_positives(&model, &tree, &cat).map_err(e)?;
            let via_scan = scan_positives(&model, &cat).map_err(e)?;
            let (a, b) = (rows(&via_index.hits), rows(&via_scan.hits));
            ensure(a == b, || {
                format!("trial {trial} {kind}: index found {} rows, scan {} (n={n}, p={p}, neg={neg})", a.len(), b.len())
            })?;
            total_hits += a.len();
        }
    }
    Ok(format!("100 trials x 2 kinds identical, {total_hits} positive rows in total"))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn c2_index_speedup() -> Outcome {
    let n = 1_000_000;
    let cat = code_space_catalog(n, 32, 1000, 8.0, 2).map_err(e)?;
    let tree = KdTree::build(&cat, 32).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = local_labeled_set(&cat, 30, 5000, 1.0, &mut rng);
    let model = train(&data, ModelKind::Dbranch, 0, &TreeHyper::default()).map_err(e)?;
    let reference = scan_positives(&model, &cat).map_err(e)?;
    let fraction = reference.hits.len() as f64 / n as f64;
    ensure(!reference.hits.is_empty() && fraction < 0.01, || format!("model is not selective: {:.3}% positive", 100.0 * fraction))?;
    let (mut t_index, mut t_scan) = (Vec::new(), Vec::new());
    for _ in 0..5 {
        let t = Instant::now();
        let found = search_positives(&model, &tree, &cat).map_err(e)?;
        t_index.push(t.elapsed());
        ensure(rows(&found.hits) == rows(&reference.hits), || "index and scan disagree".into())?;
        let t = Instant::now();
        scan_positives(&model, &cat).map_err(e)?;
        t_scan.push(t.elapsed());
    }
    let (ti, ts) = (median(t_index), median(t_scan));
    let speedup = ts.as_secs_f64() / ti.as_secs_f64();
    ensure(speedup >= 2.0, || format!("speedup {speedup:.2}x < 2x (index {ti:?}, scan {ts:?})"))?;
    Ok(format!(
        "{} positives ({:.3}%), index {ti:?} vs scan {ts:?}: {speedup:.1}x",
        reference.hits.len(),
        100.0 * fraction
    ))
}

fn c3_storage_ratio() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..n * 512).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = EmbeddingMatrix::new(n, 512, data).map_err(e)?;
    let raw_path = dir.path().join("raw.f32");
    x.write_f32_file(&raw_path).map_err(e)?;
    let head = HeadParams::init(HeadShape { input: 512, hidden: 256, output: 32 }, 3);
    let z = head.forward_matrix(&x).map_err(e)?;
    let q = Quantizer::fit(&z).map_err(e)?;
    let cat = QuantizedCatalog::new(q.params().clone(), q.encode_matrix(&z).map_err(e)?, records(n, None)).map_err(e)?;
    let code_path = dir.path().join("codes.cbrx");
    write_catalog(&cat, &code_path).map_err(e)?;
    let raw = std::fs::metadata(&raw_path).map_err(e)?.len();
    let codes = std::fs::metadata(&code_path).map_err(e)?.len() - header_len(32) as u64;
    ensure(raw == 64 * codes, || format!("raw {raw} bytes vs code payload {codes} bytes"))?;
    Ok(format!("{raw} bytes of f32 vs {codes} bytes of codes = {}x", raw / codes))
}

fn c4_quantizer_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (10_000, 32);
    let scales: Vec<f32> = (0..d).map(|_| rng.random_range(0.01..10.0)).collect();
    let data: Vec<f32> = (0..n * d).map(|i| scales[i % d] * rng.random_range(-1.0f32..1.0)).collect();
    let x = EmbeddingMatrix::new(n, d, data).map_err(e)?;
    let q = Quantizer::fit(&x).map_err(e)?;
    let mut worst = 0.0f64;
    for row in x.rows() {
        let back = q.decode(&q.encode(row).map_err(e)?).map_err(e)?;
        for j in 0..d {
            let ratio = (back[j] as f64 - row[j] as f64).abs() / (q.step(j) / 2.0);
            worst = worst.max(ratio);
        }
    }
    ensure(worst <= 1.0 + 1e-4, || format!("error reaches {worst:.6} half-steps"))?;
    Ok(format!("max error {worst:.4} of a half step over {n} vectors"))
}

fn pairwise_koleo(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        for j in 0..n {
            if i != j {
                best = best.min((&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt());
            }
        }
        total += best.ln();
    }
    -total / n as f64
}

fn c5_koleo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, d) = (rng.random_range(2..=24), rng.random_range(2..=16));
        let mut x: Array2<f64> = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        for mut row in x.rows_mut() {
            let norm = row.mapv(|v| v * v).sum().sqrt();
            row /= norm;
        }
        let loss = koleo_loss(x.view()).map_err(e)?;
        worst_abs = worst_abs.max((loss - pairwise_koleo(&x)).abs());
        let g = koleo_grad(x.view()).map_err(e)?;
        let mut fd = Array2::<f64>::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / d, idx % d);
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            fd[[r, c]] = (pairwise_koleo(&xp) - pairwise_koleo(&xm)) / (2.0 * h);
        }
        let rel = (&g - &fd).mapv(|v| v * v).sum().sqrt() / fd.mapv(|v| v * v).sum().sqrt().max(1e-12);
        worst_rel = worst_rel.max(rel);
    }
    ensure(worst_abs <= 1e-6, || format!("loss differs from pairwise oracle by {worst_abs:e}"))?;
    ensure(worst_rel <= 1e-3, || format!("gradient relative error {worst_rel:e}"))?;
    Ok(format!("loss error {worst_abs:.1e}, gradient relative error {worst_rel:.1e} over 50 batches"))
}

fn c6_koleo_recall() -> Outcome {
    let rows = recall_suite(&RecallSuiteConfig::default()).map_err(e)?;
    let summary = summarize_recall(&rows);
    let r10 = |v: HeadVariant| -> Result<f64, String> {
        summary
            .get(&v)
            .and_then(|(rec, _)| rec.iter().find(|(k, _)| *k == 10))
            .map(|&(_, r)| r)
            .ok_or_else(|| format!("no recall@10 for {v}"))
    };
    let (random, head, koleo) = (r10(HeadVariant::RandomHead)?, r10(HeadVariant::Head)?, r10(HeadVariant::HeadKoleo)?);
    let detail = format!("recall@10 random {random:.4}, head {head:.4}, head+koleo {koleo:.4}");
    ensure(koleo >= head && head >= random, || detail.clone())?;
    Ok(detail)
}

fn c7_crossover() -> Outcome {
    let cat = labeled_cluster_catalog(&ClusterConfig::default()).map_err(e)?;
    let cfg = CrossoverConfig::default();
    let single = crossover_experiment(&cat, ModelKind::Dbranch, &cfg).map_err(e)?.crossover;
    let ensemble = crossover_experiment(&cat, ModelKind::DbranchEnsemble, &cfg).map_err(e)?.crossover;
    let detail = format!("crossover single {single:?}, ensemble {ensemble:?} positives");
    match (single, ensemble) {
        (Some(s), Some(en)) if s <= 30 && en <= s => Ok(detail),
        _ => Err(detail),
    }
}

fn c8_kdtree_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0usize;
    for inst in 0..200 {
        let n = rng.random_range(1..=5_000);
        let dim = rng.random_range(1..=32);
        let cat = if inst % 2 == 0 {
            random_catalog(n, dim, &mut rng)
        } else {
            code_space_catalog(n, dim, rng.random_range(1..8), rng.random_range(0.5..10.0), inst as u64).map_err(e)?
        };
        let tree = KdTree::build(&cat, rng.random_range(1..=40)).map_err(e)?;
        for _ in 0..5 {
            let q: Vec<u8> = if rng.random_bool(0.5) { cat.code(rng.random_range(0..n)).to_vec() } else { (0..dim).map(|_| rng.random()).collect() };
            let k = rng.random_range(1..=n.min(50) + 2);
            let mut oracle: Vec<(u32, usize)> = (0..n).map(|r| (sq_dist(cat.code(r), &q), r)).collect();
            oracle.sort_unstable();
            oracle.truncate(k);
            let got: Vec<usize> = tree.knn(&q, k, KnnMode::Exact).map_err(e)?.iter().map(|nb| nb.row).collect();
            let want: Vec<usize> = oracle.iter().map(|o| o.1).collect();
            ensure(got.iter().collect::<BTreeSet<_>>() == want.iter().collect::<BTreeSet<_>>(), || {
                format!("instance {inst}: kNN mismatch (n={n}, dim={dim}, k={k})")
            })?;

            let (mut lower, mut upper) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
            for _ in 0..dim {
                let (a, b): (u8, u8) = (rng.random(), rng.random());
                if rng.random_bool(0.3) {
                    lower.push(0);
                    upper.push(255);
                } else {
                    lower.push(a.min(b));
                    upper.push(a.max(b));
                }
            }
            let b = CodeBox::new(lower, upper).map_err(e)?;
            let got: BTreeSet<usize> = tree.range_query(&b).map_err(e)?.into_iter().collect();
            let want: BTreeSet<usize> = (0..n).filter(|&r| b.contains(cat.code(r))).collect();
            ensure(got == want, || format!("instance {inst}: range query mismatch ({} vs {})", got.len(), want.len()))?;
            checked += 2;
        }
    }
    Ok(format!("200 instances, {checked} queries matched brute force"))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn sbc(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sbc")).args(args).output().map_err(e)?;
    ensure(out.status.success(), || format!("sbc {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
}

fn c9_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    sbc(&["toy", "--out", &p("")])?;
    sbc(&["train-head", "--pairs-a", &p(toy::PAIRS_A), "--pairs-b", &p(toy::PAIRS_B), "--out", &p(toy::HEAD), "--epochs", "3"])?;
    sbc(&["ingest", "--embeddings", &p(toy::EMBEDDINGS), "--meta", &p(toy::META), "--head", &p(toy::HEAD), "--out", &p(toy::CATALOG)])?;
    sbc(&["build-index", "--catalog", &p(toy::CATALOG), "--out", &p(toy::INDEX)])?;

    let mut child = Command::new(env!("CARGO_BIN_EXE_sbc"))
        .args(["serve", "--config", &p(toy::CONFIG)])
        .env("SBC_LISTEN", "127.0.0.1:0")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(e)?;
    let stdout = child.stdout.take().ok_or("no stdout")?;
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).map_err(e)?;
    let base = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected banner {line:?}"))?.to_string();

    let query = first_row(d)?;
    let rt = tokio::runtime::Runtime::new().map_err(e)?;
    let result = rt.block_on(async move {
        let client = reqwest::Client::new();
        let post = |path: &str, body: Value| {
            let req = client.post(format!("{base}{path}")).json(&body);
            async move {
                let resp = req.send().await.map_err(e)?;
                let status = resp.status();
                let v: Value = resp.json().await.map_err(e)?;
                ensure(status.is_success(), || format!("{status}: {v}"))?;
                Ok::<Value, String>(v)
            }
        };
        let search = post("/search", json!({"dataset": "toy", "query": {"embedding": query}, "k": 20})).await?;
        let found = search["results"].as_array().ok_or("search returned no results")?;
        ensure(found.len() == 20 && found[0]["id"] == 0, || format!("unexpected search results {search}"))?;
        let pos = found[1]["id"].clone();
        let neg = found[19]["id"].clone();
        let body = json!({
            "dataset": "toy",
            "labels": [{"id": pos, "label": "pos"}, {"id": neg, "label": "neg"}],
            "model": "dbranch",
            "negative_samples": 100,
            "seed": 7,
        });
        let a = post("/finetune", body.clone()).await?;
        let b = post("/finetune", body).await?;
        let n = a["results"].as_array().map_or(0, Vec::len);
        ensure(n > 0, || format!("fine-tune returned no results: {a}"))?;
        for key in ["train_ms", "query_ms", "n_positives", "iteration"] {
            ensure(a["stats"].get(key).is_some(), || format!("stats lack {key}: {}", a["stats"]))?;
        }
        ensure(a["results"] == b["results"], || "fine-tune results differ between identical requests".into())?;
        Ok::<String, String>(format!("search 20 hits, fine-tune {n} results, repeat identical"))
    });
    drop(server);
    result
}

fn first_row(dir: &Path) -> Result<Vec<f32>, String> {
    let x = EmbeddingMatrix::read_f32_file(dir.join(toy::EMBEDDINGS), 512).map_err(e)?;
    Ok(x.row(0).to_vec())
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "index/scan equivalence", c1_index_scan_equivalence),
        (2, "index speedup", c2_index_speedup),
        (3, "quantization factor", c3_storage_ratio),
        (4, "quantizer error bound", c4_quantizer_bound),
        (5, "KoLeo correctness", c5_koleo),
        (6, "KoLeo uniformity effect", c6_koleo_recall),
        (7, "crossover experiment", c7_crossover),
        (8, "k-d tree exactness", c8_kdtree_oracles),
        (9, "end-to-end API smoke", c9_end_to_end),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

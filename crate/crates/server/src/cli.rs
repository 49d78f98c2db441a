//! `sbc` operator commands. Each subcommand drives one stage of the pipeline.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbc_core::catalog::{read_catalog, read_metadata, storage_reduction_factor, write_catalog, EmbeddingMatrix, QuantizedCatalog};
use sbc_core::eval::{
    crossover_experiment, quantize_fitted, recall_at_ks, recall_suite, summarize_recall, write_crossover_csv, write_recall_csv,
    zero_shot_accuracy, CrossoverConfig, RecallSuiteConfig,
};
use sbc_core::head::{train_head_from, HeadParams, HeadShape, TrainConfig};
use sbc_core::index::{KdTree, DEFAULT_LEAF_SIZE};
use sbc_core::models::ModelKind;
use sbc_core::quantizer::Quantizer;
use sbc_core::synth::{labeled_cluster_catalog, ClusterConfig, PairGenerator, PairsConfig};

use crate::config::ServerConfig;
use crate::toy::{write_toy, ToyOptions};

#[derive(Debug, Parser)]
#[command(name = "sbc", version, about = "Search-by-classification retrieval: ingestion, indexing, serving and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode raw embeddings through a head and write a quantized catalog.
    Ingest(IngestArgs),
    /// Train the projection head on paired views.
    TrainHead(TrainHeadArgs),
    /// Build the k-d tree index over a catalog.
    BuildIndex(BuildIndexArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Run an evaluation suite and emit CSV.
    Eval(EvalArgs),
    /// Write the bundled synthetic toy dataset.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Row-major little-endian f32 file, one embedding per row.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// JSON lines, one {"id","uri","label"} object per embedding row.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Output code file; metadata is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[arg(long, requires = "pairs_b", conflicts_with = "synthetic")]
    pub pairs_a: Option<PathBuf>,
    #[arg(long, requires = "pairs_a")]
    pub pairs_b: Option<PathBuf>,
    /// Train on this many synthetic pairs instead of files.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub output: usize,
    /// KoLeo weight λ; 0 disables the regularizer.
    #[arg(long, default_value_t = 0.1)]
    pub koleo_weight: f64,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LEAF_SIZE)]
    pub leaf_size: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured listen address.
    #[arg(long, env = crate::config::LISTEN_ENV)]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Recall,
    Crossover,
    Zeroshot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds, starting at 0.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Models for the crossover suite.
    #[arg(long = "model", value_parser = parse_model)]
    pub models: Vec<ModelKind>,
    /// Largest positive count for the crossover suite.
    #[arg(long, default_value_t = 30)]
    pub max_positives: usize,
    /// Labeled catalog for the crossover or zero-shot suite.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Raw embeddings for the recall suite (requires --head).
    #[arg(long, requires = "head")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Per-class raw embeddings, row c = class c, for the zero-shot suite.
    #[arg(long, requires_all = ["head", "catalog"])]
    pub classes: Option<PathBuf>,
    /// Query rows for recall.
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    /// Synthetic items per seed for the recall and zero-shot suites.
    #[arg(long)]
    pub items: Option<usize>,
    /// Training epochs for the synthetic recall suite heads.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ToyOptions::default().items)]
    pub items: usize,
    #[arg(long, default_value_t = ToyOptions::default().train_pairs)]
    pub train_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::TrainHead(a) => train_head_cmd(&a),
        Command::BuildIndex(a) => build_index(&a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(&a),
        Command::Toy(a) => {
            let cfg = write_toy(&a.out, ToyOptions { items: a.items, train_pairs: a.train_pairs, seed: a.seed })?;
            eprintln!("wrote toy data; config at {}", cfg.display());
            Ok(())
        }
    }
}

/// Head outputs for every row, quantized with a quantizer fitted on them.
pub fn ingest_catalog(embeddings: &Path, meta: &Path, head: &HeadParams) -> anyhow::Result<QuantizedCatalog> {
    let x = EmbeddingMatrix::read_f32_file(embeddings, head.shape().input)
        .with_context(|| format!("reading {}", embeddings.display()))?;
    let records = read_metadata(meta).with_context(|| format!("reading {}", meta.display()))?;
    if records.len() != x.n() {
        bail!("{} has {} rows but {} has {} records", embeddings.display(), x.n(), meta.display(), records.len());
    }
    let z = head.forward_matrix(&x)?;
    let q = Quantizer::fit(&z)?;
    let codes = q.encode_matrix(&z)?;
    Ok(QuantizedCatalog::new(q.params().clone(), codes, records)?)
}

fn ingest(a: &IngestArgs) -> anyhow::Result<()> {
    let head = HeadParams::read(&a.head).with_context(|| format!("reading head {}", a.head.display()))?;
    let catalog = ingest_catalog(&a.embeddings, &a.meta, &head)?;
    write_catalog(&catalog, &a.out)?;
    let shape = head.shape();
    eprintln!(
        "ingested {} rows: {}-d f32 -> {}-d u8 codes ({} code bytes, {}x smaller)",
        catalog.len(),
        shape.input,
        shape.output,
        catalog.codes.len(),
        storage_reduction_factor(shape.input, shape.output)?
    );
    Ok(())
}

fn train_head_cmd(a: &TrainHeadArgs) -> anyhow::Result<()> {
    let shape = HeadShape { input: a.input_dim, hidden: a.hidden, output: a.output };
    let (pa, pb) = match (&a.pairs_a, &a.pairs_b, a.synthetic) {
        (Some(pa), Some(pb), None) => (
            EmbeddingMatrix::read_f32_file(pa, a.input_dim).with_context(|| format!("reading {}", pa.display()))?,
            EmbeddingMatrix::read_f32_file(pb, a.input_dim).with_context(|| format!("reading {}", pb.display()))?,
        ),
        (None, None, Some(n)) => {
            let pairs = PairGenerator::new(PairsConfig { dim: a.input_dim, seed: a.seed, ..PairsConfig::default() }).draw(n)?;
            (pairs.a, pairs.b)
        }
        _ => bail!("pass either --pairs-a and --pairs-b, or --synthetic N"),
    };
    let cfg = TrainConfig {
        shape,
        koleo_weight: a.koleo_weight,
        temperature: a.temperature,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let (params, _) = train_head_from(HeadParams::init(shape, a.seed), &pa, &pb, &cfg, &mut io::stderr())?;
    params.write(&a.out)?;
    eprintln!("wrote head {}", a.out.display());
    Ok(())
}

fn build_index(a: &BuildIndexArgs) -> anyhow::Result<()> {
    let catalog = read_catalog(&a.catalog).with_context(|| format!("reading {}", a.catalog.display()))?;
    let tree = KdTree::build(&catalog, a.leaf_size)?;
    tree.write(&a.out)?;
    eprintln!("indexed {} rows into {} leaves ({} nodes)", tree.len(), tree.leaf_count(), tree.node_count());
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let mut cfg = ServerConfig::load(&a.config)?;
    if let Some(listen) = a.listen {
        cfg.listen = listen;
    }
    tokio::runtime::Runtime::new()?.block_on(crate::api::serve(cfg))
}

fn csv_sink(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn seeds(a: &EvalArgs, default: u64) -> Vec<u64> {
    (0..a.seeds.unwrap_or(default)).collect()
}

fn synthetic_recall_config(a: &EvalArgs) -> RecallSuiteConfig {
    let mut cfg = RecallSuiteConfig { seeds: seeds(a, 5), queries: a.queries, ..RecallSuiteConfig::default() };
    if let Some(items) = a.items {
        cfg.eval_items = items;
        cfg.queries = cfg.queries.min(items);
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let mut out = csv_sink(&a.out)?;
    match a.suite {
        Suite::Recall => match (&a.embeddings, &a.head) {
            (Some(emb), Some(head)) => external_recall(a, emb, head, &mut out)?,
            _ => {
                let rows = recall_suite(&synthetic_recall_config(a))?;
                write_recall_csv(&rows, &mut out)?;
                for (variant, (recall, zs)) in summarize_recall(&rows) {
                    let cells: Vec<String> = recall.iter().map(|(k, r)| format!("R@{k} {r:.3}")).collect();
                    eprintln!("{variant:<12} {}  zero-shot {zs:.3}", cells.join("  "));
                }
            }
        },
        Suite::Crossover => {
            let catalog = match &a.catalog {
                Some(p) => read_catalog(p).with_context(|| format!("reading {}", p.display()))?,
                None => labeled_cluster_catalog(&ClusterConfig::default())?,
            };
            let models = if a.models.is_empty() { vec![ModelKind::Dbranch, ModelKind::DbranchEnsemble] } else { a.models.clone() };
            let cfg = CrossoverConfig { counts: (1..=a.max_positives).collect(), seeds: seeds(a, 10), ..CrossoverConfig::default() };
            let mut first = true;
            for kind in models {
                let result = crossover_experiment(&catalog, kind, &cfg)?;
                let mut buf = Vec::new();
                write_crossover_csv(&result, &mut buf)?;
                let text = String::from_utf8(buf)?;
                let body = if first { text.as_str() } else { text.split_once('\n').map_or("", |(_, rest)| rest) };
                out.write_all(body.as_bytes())?;
                first = false;
                match result.crossover {
                    Some(p) => eprintln!("{kind}: model F1 exceeds the nearest-neighbor baseline from {p} positives"),
                    None => eprintln!("{kind}: no crossover up to {} positives", a.max_positives),
                }
            }
        }
        Suite::Zeroshot => match (&a.catalog, &a.classes, &a.head) {
            (Some(cat), Some(classes), Some(head)) => external_zero_shot(cat, classes, head, &mut out)?,
            _ => {
                let rows = recall_suite(&synthetic_recall_config(a))?;
                writeln!(out, "variant,seed,zero_shot")?;
                for r in &rows {
                    writeln!(out, "{},{},{:.6}", r.variant, r.seed, r.zero_shot)?;
                }
                for (variant, (_, zs)) in summarize_recall(&rows) {
                    eprintln!("{variant:<12} zero-shot {zs:.3}");
                }
            }
        },
    }
    out.flush()?;
    Ok(())
}

fn external_recall(a: &EvalArgs, embeddings: &Path, head: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let head = HeadParams::read(head)?;
    let x = EmbeddingMatrix::read_f32_file(embeddings, head.shape().input)?;
    let z = head.forward_matrix(&x)?;
    let (cat, _) = quantize_fitted(&z, None)?;
    let ks: Vec<usize> = [1, 10, 100].into_iter().filter(|&k| k < x.n()).collect();
    if ks.is_empty() {
        bail!("need at least 2 rows for recall");
    }
    let mut rows: Vec<usize> = (0..x.n()).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    rows.truncate(a.queries.max(1));
    let recall = recall_at_ks(&z, &cat, &rows, &ks)?;
    let header: Vec<String> = ks.iter().map(|k| format!("recall_at_{k}")).collect();
    writeln!(out, "source,{}", header.join(","))?;
    let cells: Vec<String> = recall.iter().map(|r| format!("{r:.6}")).collect();
    writeln!(out, "{},{}", embeddings.display(), cells.join(","))?;
    let summary: Vec<String> = ks.iter().zip(&recall).map(|(k, r)| format!("R@{k} {r:.3}")).collect();
    eprintln!("{}", summary.join("  "));
    Ok(())
}

fn external_zero_shot(catalog: &Path, classes: &Path, head: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let cat = read_catalog(catalog)?;
    let head = HeadParams::read(head)?;
    let class_rows = EmbeddingMatrix::read_f32_file(classes, head.shape().input)?;
    let q = Quantizer::new(cat.params.clone())?;
    let mut class_codes = BTreeMap::new();
    for (c, row) in class_rows.rows().enumerate() {
        class_codes.insert(c as i64, q.encode(&head.forward(row)?)?);
    }
    let acc = zero_shot_accuracy(&cat, &class_codes)?;
    writeln!(out, "catalog,zero_shot")?;
    writeln!(out, "{},{acc:.6}", catalog.display())?;
    eprintln!("zero-shot accuracy {acc:.3}");
    Ok(())
}

//! Bundled toy data: synthetic 512-d embeddings with class labels, training
//! pairs for the head, placeholder SVG thumbnails and a ready config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use sbc_core::catalog::{write_metadata, CatalogRecord};
use sbc_core::synth::{PairGenerator, PairsConfig};

pub const PAIRS_A: &str = "pairs_a.f32";
pub const PAIRS_B: &str = "pairs_b.f32";
pub const EMBEDDINGS: &str = "embeddings.f32";
pub const META: &str = "meta.jsonl";
pub const CLASSES: &str = "classes.f32";
pub const HEAD: &str = "head.cbhd";
pub const CATALOG: &str = "catalog.cbrx";
pub const INDEX: &str = "index.cbkd";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy)]
pub struct ToyOptions {
    pub items: usize,
    pub train_pairs: usize,
    pub seed: u64,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self { items: 2000, train_pairs: 2048, seed: 0 }
    }
}

const PALETTE: [&str; 10] =
    ["#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe"];

fn thumbnail(id: usize, class: i64) -> String {
    let fill = PALETTE[class.rem_euclid(PALETTE.len() as i64) as usize];
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"96\" height=\"96\">\
         <rect width=\"96\" height=\"96\" fill=\"{fill}\"/>\
         <text x=\"48\" y=\"56\" font-size=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\">{id}</text></svg>\n"
    )
}

/// Writes the toy inputs into `dir` and returns the config path. The head,
/// catalog and index named in the config are produced by `train-head`,
/// `ingest` and `build-index`.
pub fn write_toy(dir: &Path, opts: ToyOptions) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir.join("images")).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut gen = PairGenerator::new(PairsConfig { seed: opts.seed, ..PairsConfig::default() });
    let train = gen.draw(opts.train_pairs)?;
    train.a.write_f32_file(dir.join(PAIRS_A))?;
    train.b.write_f32_file(dir.join(PAIRS_B))?;

    let items = gen.draw(opts.items)?;
    items.a.write_f32_file(dir.join(EMBEDDINGS))?;
    let classes = sbc_core::catalog::EmbeddingMatrix::from_rows(&items.prototypes)?;
    classes.write_f32_file(dir.join(CLASSES))?;
    let records: Vec<CatalogRecord> = items
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| CatalogRecord { id: i as u64, uri: format!("images/item-{i}.svg"), label: Some(label) })
        .collect();
    for (i, r) in records.iter().enumerate() {
        fs::write(dir.join(&r.uri), thumbnail(i, r.label.unwrap_or(0)))?;
    }
    write_metadata(&dir.join(META), &records)?;

    let config = format!(
        "listen = \"127.0.0.1:8080\"\n\
         cors_origins = [\"*\"]\n\n\
         [[datasets]]\n\
         name = \"toy\"\n\
         catalog = \"{CATALOG}\"\n\
         index = \"{INDEX}\"\n\
         head = \"{HEAD}\"\n"
    );
    let path = dir.join(CONFIG);
    fs::write(&path, config)?;
    Ok(path)
}

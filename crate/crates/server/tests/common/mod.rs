#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use sbc_server::cli::{run, Cli};
use sbc_server::toy;

pub fn sbc(args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["sbc"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv)?)
}

/// Small toy dataset with head, catalog and index; returns the config path.
pub fn toy_pipeline(dir: &Path, items: usize) -> PathBuf {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let items = items.to_string();
    sbc(&["toy", "--out", dir.to_str().unwrap(), "--items", &items, "--train-pairs", "256"]).unwrap();
    sbc(&[
        "train-head", "--pairs-a", &p(toy::PAIRS_A), "--pairs-b", &p(toy::PAIRS_B), "--out", &p(toy::HEAD),
        "--hidden", "64", "--epochs", "1",
    ])
    .unwrap();
    sbc(&["ingest", "--embeddings", &p(toy::EMBEDDINGS), "--meta", &p(toy::META), "--head", &p(toy::HEAD), "--out", &p(toy::CATALOG)])
        .unwrap();
    sbc(&["build-index", "--catalog", &p(toy::CATALOG), "--out", &p(toy::INDEX)]).unwrap();
    dir.join(toy::CONFIG)
}

pub fn first_embedding(dir: &Path) -> Vec<f32> {
    let bytes = std::fs::read(dir.join(toy::EMBEDDINGS)).unwrap();
    bytes[..512 * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

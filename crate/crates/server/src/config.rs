//! Server configuration file (TOML).
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! sidecar_url = "http://127.0.0.1:9000"
//! cors_origins = ["http://localhost:5173"]
//!
//! [finetune]
//! model = "dbranch"
//! negative_samples = 1000
//! negative_weight = 10.0
//! max_results = 500
//! seed = 0
//!
//! [[datasets]]
//! name = "toy"
//! catalog = "catalog.cbrx"
//! index = "index.cbkd"
//! head = "head.cbhd"
//! image_root = "images"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.
//! `SBC_LISTEN` overrides `listen`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbc_core::catalog::read_header;
use sbc_core::engine::{FinetuneParams, DEFAULT_ANN_LEAVES};
use sbc_core::head::HeadParams;
use sbc_core::index::KdTree;
use sbc_core::models::{ModelKind, TreeHyper};

pub const LISTEN_ENV: &str = "SBC_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid listen address {0:?}")]
    Listen(String),
    #[error("duplicate dataset name {0:?}")]
    DuplicateDataset(String),
    #[error("dataset {name}: {message}")]
    Dataset { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneDefaults {
    #[serde(default = "default_model")]
    pub model: ModelKind,
    #[serde(default = "default_negative_samples")]
    pub negative_samples: usize,
    #[serde(default = "default_negative_weight")]
    pub negative_weight: f64,
    #[serde(default = "default_max_results")]
    pub max_results: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hyper: TreeHyper,
}

fn default_model() -> ModelKind {
    FinetuneParams::default().model_kind
}
fn default_negative_samples() -> usize {
    FinetuneParams::default().negative_samples
}
fn default_negative_weight() -> f64 {
    FinetuneParams::default().negative_weight
}
fn default_max_results() -> usize {
    FinetuneParams::default().max_results
}

impl Default for FinetuneDefaults {
    fn default() -> Self {
        let p = FinetuneParams::default();
        Self {
            model: p.model_kind,
            negative_samples: p.negative_samples,
            negative_weight: p.negative_weight,
            max_results: p.max_results,
            seed: p.seed,
            hyper: p.hyper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub catalog: PathBuf,
    pub index: PathBuf,
    pub head: PathBuf,
    /// Base directory for relative record uris; defaults to the catalog's directory.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default = "default_ann_leaves")]
    pub ann_leaves: usize,
}

fn default_ann_leaves() -> usize {
    DEFAULT_ANN_LEAVES
}

impl DatasetConfig {
    pub fn image_root(&self) -> PathBuf {
        self.image_root
            .clone()
            .unwrap_or_else(|| self.catalog.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub sidecar_url: Option<String>,
    #[serde(default)]
    pub cors_origins: Vec<String>,
    #[serde(default)]
    pub finetune: FinetuneDefaults,
    #[serde(default)]
    pub datasets: Vec<DatasetConfig>,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            sidecar_url: None,
            cors_origins: Vec::new(),
            finetune: FinetuneDefaults::default(),
            datasets: Vec::new(),
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str, base: &Path, path_for_errors: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ServerConfig =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: path_for_errors.to_path_buf(), source })?;
        for d in &mut cfg.datasets {
            for p in [&mut d.catalog, &mut d.index, &mut d.head] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(root) = d.image_root.as_mut().filter(|r| r.is_relative()) {
                *root = base.join(&*root);
            }
        }
        Ok(cfg)
    }

    /// Reads and resolves a config file, then applies the `SBC_LISTEN` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml(&text, base, path)?;
        if let Ok(listen) = std::env::var(LISTEN_ENV) {
            cfg.listen = listen;
        }
        Ok(cfg)
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen.parse().map_err(|_| ConfigError::Listen(self.listen.clone()))
    }

    pub fn finetune_params(&self) -> FinetuneParams {
        let f = &self.finetune;
        FinetuneParams {
            model_kind: f.model,
            negative_samples: f.negative_samples,
            negative_weight: f.negative_weight,
            seed: f.seed,
            max_results: f.max_results,
            hyper: f.hyper,
        }
    }

    /// Checks that names are unique and every dataset's files exist and
    /// agree on row count and code dimension, reading headers only.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        self.finetune_params().validate().map_err(|e| ConfigError::Dataset { name: "[finetune]".into(), message: e.to_string() })?;
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(ConfigError::DuplicateDataset(d.name.clone()));
            }
            let fail = |message: String| ConfigError::Dataset { name: d.name.clone(), message };
            for (what, p) in [("catalog", &d.catalog), ("index", &d.index), ("head", &d.head)] {
                if !p.is_file() {
                    return Err(fail(format!("{what} file {} does not exist", p.display())));
                }
            }
            let header = read_header(&d.catalog).map_err(|e| fail(e.to_string()))?;
            let (n, dim) = KdTree::read_shape(&d.index).map_err(|e| fail(e.to_string()))?;
            if n != header.n as usize || dim != header.dim() {
                return Err(fail(format!(
                    "index covers {n} rows of dimension {dim}, catalog has {} rows of dimension {}",
                    header.n,
                    header.dim()
                )));
            }
            let head = HeadParams::read(&d.head).map_err(|e| fail(e.to_string()))?;
            if head.shape().output != header.dim() {
                return Err(fail(format!(
                    "head outputs {} dimensions, catalog codes have {}",
                    head.shape().output,
                    header.dim()
                )));
            }
        }
        Ok(())
    }
}

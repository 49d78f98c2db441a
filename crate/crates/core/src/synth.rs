//! Seeded synthetic data for tests, benchmarks and the toy dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{CatalogRecord, EmbeddingMatrix, QuantizationParams, QuantizedCatalog};
use crate::error::Result;
use crate::quantizer::Quantizer;

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairsConfig {
    pub dim: usize,
    pub classes: usize,
    /// Items are generated in a latent space of this dimension and mapped
    /// into `dim` by a fixed random linear embedding.
    pub latent_dim: usize,
    /// Std of an item's latent coordinates around its class center (class
    /// centers have unit std per coordinate).
    pub item_noise: f32,
    /// Per-coordinate std of each view around its item, in the ambient space.
    pub view_noise: f32,
    pub seed: u64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self { dim: 512, classes: 10, latent_dim: 16, item_noise: 0.03, view_noise: 0.001, seed: 0 }
    }
}

/// Paired views of synthetic items: `a[i]` and `b[i]` are two noisy draws of
/// the same item. Items cluster around one of `classes` latent centers.
#[derive(Debug, Clone)]
pub struct PairedViews {
    pub a: EmbeddingMatrix,
    pub b: EmbeddingMatrix,
    pub labels: Vec<i64>,
    pub prototypes: Vec<Vec<f32>>,
}

pub struct PairGenerator {
    cfg: PairsConfig,
    centers: Vec<Vec<f32>>,
    /// `dim × latent_dim`, row-major.
    embedding: Vec<f32>,
    prototypes: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl PairGenerator {
    pub fn new(cfg: PairsConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = cfg.latent_dim.max(1);
        let centers: Vec<Vec<f32>> = (0..cfg.classes).map(|_| gaussian(&mut rng, m)).collect();
        let scale = 1.0 / (m as f32).sqrt();
        let embedding: Vec<f32> = gaussian(&mut rng, cfg.dim * m).into_iter().map(|v| v * scale).collect();
        let mut gen = Self { cfg, centers, embedding, prototypes: Vec::new(), rng };
        gen.prototypes = gen.centers.iter().map(|c| gen.ambient(c)).collect();
        gen
    }

    fn ambient(&self, z: &[f32]) -> Vec<f32> {
        let mut x: Vec<f32> =
            self.embedding.chunks_exact(z.len()).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect();
        normalize(&mut x);
        x
    }

    /// Unit-norm ambient images of the class centers.
    pub fn prototypes(&self) -> &[Vec<f32>] {
        &self.prototypes
    }

    pub fn draw(&mut self, n: usize) -> Result<PairedViews> {
        let d = self.cfg.dim;
        let (mut a, mut b, mut labels) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n));
        for _ in 0..n {
            let class = self.rng.random_range(0..self.cfg.classes);
            let z: Vec<f32> = self.centers[class]
                .iter()
                .map(|&c| c + self.cfg.item_noise * Distribution::<f32>::sample(&StandardNormal, &mut self.rng))
                .collect();
            let item = self.ambient(&z);
            for out in [&mut a, &mut b] {
                let mut view: Vec<f32> = item
                    .iter()
                    .map(|&x| x + self.cfg.view_noise * Distribution::<f32>::sample(&StandardNormal, &mut self.rng))
                    .collect();
                normalize(&mut view);
                out.extend(view);
            }
            labels.push(class as i64);
        }
        Ok(PairedViews {
            a: EmbeddingMatrix::new(n, d, a)?,
            b: EmbeddingMatrix::new(n, d, b)?,
            labels,
            prototypes: self.prototypes.clone(),
        })
    }
}

/// Records `0..n` with `item-<id>.png` uris and optional labels.
pub fn records(n: usize, labels: Option<&[i64]>) -> Vec<CatalogRecord> {
    (0..n)
        .map(|i| CatalogRecord { id: i as u64, uri: format!("item-{i}.png"), label: labels.map(|l| l[i]) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Gaussian modes per class; multi-modal classes make a single query's
    /// neighborhood an incomplete description of the class.
    pub modes_per_class: usize,
    /// Std of mode centers around the origin.
    pub center_spread: f32,
    /// Std of points around their mode center.
    pub point_spread: f32,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { n: 10_000, dim: 32, classes: 10, modes_per_class: 3, center_spread: 1.0, point_spread: 0.35, seed: 0 }
    }
}

/// Labeled float points from a mixture of per-class Gaussian modes.
pub fn labeled_clusters(cfg: &ClusterConfig) -> Result<(EmbeddingMatrix, Vec<i64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<Vec<f32>>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.modes_per_class)
                .map(|_| gaussian(&mut rng, cfg.dim).into_iter().map(|v| v * cfg.center_spread).collect())
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.n * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = i % cfg.classes;
        let mode = &centers[class][rng.random_range(0..cfg.modes_per_class)];
        data.extend(mode.iter().map(|&c| c + cfg.point_spread * Distribution::<f32>::sample(&StandardNormal, &mut rng)));
        labels.push(class as i64);
    }
    Ok((EmbeddingMatrix::new(cfg.n, cfg.dim, data)?, labels))
}

/// [`labeled_clusters`] quantized into a labeled catalog.
pub fn labeled_cluster_catalog(cfg: &ClusterConfig) -> Result<QuantizedCatalog> {
    let (points, labels) = labeled_clusters(cfg)?;
    let q = Quantizer::fit(&points)?;
    let codes = q.encode_matrix(&points)?;
    QuantizedCatalog::new(q.params().clone(), codes, records(cfg.n, Some(&labels)))
}

/// Large unlabeled catalog generated directly in code space: `clusters`
/// random centers with Gaussian scatter of std `spread` code units.
pub fn code_space_catalog(n: usize, dim: usize, clusters: usize, spread: f64, seed: u64) -> Result<QuantizedCatalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters.max(1))
        .map(|_| (0..dim).map(|_| rng.random_range(30.0..225.0)).collect())
        .collect();
    let mut codes = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = &centers[rng.random_range(0..centers.len())];
        for &m in c {
            let z: f64 = StandardNormal.sample(&mut rng);
            codes.push((m + spread * z).round().clamp(0.0, 255.0) as u8);
        }
    }
    let params = QuantizationParams::new(vec![0.0; dim], vec![1.0; dim])?;
    QuantizedCatalog::new(params, codes, records(n, None))
}

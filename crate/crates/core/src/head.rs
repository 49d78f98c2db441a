//! Projection head: a two-layer fully connected network (rectified hidden
//! layer, L2-normalized output) trained on paired views with a symmetric
//! InfoNCE alignment loss plus a weighted KoLeo term.
//!
//! All training math runs in `f64`; parameters are rounded to `f32` at the end
//! of training so the serialized head reproduces in-memory behavior exactly.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::catalog::{write_atomic, EmbeddingMatrix};
use crate::error::{invalid, Error, Result};
use crate::koleo::koleo_loss_and_grad;

pub const HEAD_MAGIC: &[u8; 4] = b"CBHD";
pub const HEAD_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for HeadShape {
    fn default() -> Self {
        Self { input: 512, hidden: 256, output: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `hidden × input`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `output × hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients, laid out like [`HeadParams`].
pub type HeadGrads = HeadParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub shape: HeadShape,
    pub koleo_weight: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shape: HeadShape::default(),
            koleo_weight: 0.1,
            temperature: 0.07,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !(self.koleo_weight >= 0.0 && self.koleo_weight.is_finite()) {
            return Err(invalid("koleo weight must be finite and non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        let s = self.shape;
        if s.input == 0 || s.hidden == 0 || s.output == 0 {
            return Err(invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub align: f64,
    /// Unweighted KoLeo value averaged over both views (0 when the weight is 0).
    pub koleo: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<LossParts>,
}

impl HeadParams {
    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            w1: Array2::zeros((shape.hidden, shape.input)),
            b1: Array1::zeros(shape.hidden),
            w2: Array2::zeros((shape.output, shape.hidden)),
            b2: Array1::zeros(shape.output),
        }
    }

    /// He-uniform weights, zero biases, rounded to `f32` precision.
    pub fn init(shape: HeadShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(shape);
        let a1 = (6.0 / shape.input as f64).sqrt();
        let a2 = (6.0 / shape.hidden as f64).sqrt();
        let u1 = Uniform::new_inclusive(-a1, a1).expect("valid range");
        let u2 = Uniform::new_inclusive(-a2, a2).expect("valid range");
        p.w1.mapv_inplace(|_| u1.sample(&mut rng));
        p.w2.mapv_inplace(|_| u2.sample(&mut rng));
        p.round_to_f32();
        p
    }

    pub fn shape(&self) -> HeadShape {
        HeadShape { input: self.w1.ncols(), hidden: self.w1.nrows(), output: self.w2.nrows() }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Maps one input vector to a unit-norm output vector.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let m = EmbeddingMatrix::new(1, x.len(), x.to_vec())?;
        Ok(self.forward_matrix(&m)?.row(0).to_vec())
    }

    pub fn forward_matrix(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let shape = self.shape();
        if x.d() != shape.input {
            return Err(Error::DimensionMismatch { expected: shape.input, found: x.d() });
        }
        let mut out = Vec::with_capacity(x.n() * shape.output);
        // Chunked to bound the hidden-activation buffer on large catalogs.
        for chunk in x.data().chunks(4096 * shape.input) {
            let rows = chunk.len() / shape.input;
            let xa = Array2::from_shape_fn((rows, shape.input), |(i, j)| chunk[i * shape.input + j] as f64);
            let cache = self.forward_batch(xa.view())?;
            out.extend(cache.z.iter().map(|&v| v as f32));
        }
        EmbeddingMatrix::new(x.n(), shape.output, out)
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let h = pre.mapv(|v| v.max(0.0));
        let u = h.dot(&self.w2.t()) + &self.b2;
        let norms = u.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(invalid(format!(
                "row {i} has a zero or non-finite pre-normalization output"
            )));
        }
        let z = &u / &norms.view().insert_axis(Axis(1));
        Ok(ForwardCache { x: x.to_owned(), pre, h, norms, z })
    }

    /// Backpropagates `dz` (gradient w.r.t. normalized outputs) to parameters.
    fn backward(&self, cache: &ForwardCache, dz: &Array2<f64>) -> HeadGrads {
        let zdot = (&cache.z * dz).sum_axis(Axis(1)).insert_axis(Axis(1));
        let du = (dz - &(&cache.z * &zdot)) / cache.norms.view().insert_axis(Axis(1));
        let gw2 = du.t().dot(&cache.h);
        let gb2 = du.sum_axis(Axis(0));
        let mut dh = du.dot(&self.w2);
        dh.zip_mut_with(&cache.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let gw1 = dh.t().dot(&cache.x);
        let gb1 = dh.sum_axis(Axis(0));
        HeadParams { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let mut buf = Vec::new();
        buf.extend_from_slice(HEAD_MAGIC);
        buf.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        buf.extend_from_slice(&3u16.to_le_bytes());
        for w in [s.input, s.hidden, s.output] {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != HEAD_MAGIC {
            return Err(Error::Format("not a head parameter file (bad magic)".into()));
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated { expected: 20, found: bytes.len() as u64 });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != HEAD_VERSION {
            return Err(Error::Format(format!("unsupported head version {version}")));
        }
        let layers = u16::from_le_bytes([bytes[6], bytes[7]]);
        if layers != 3 {
            return Err(Error::Format(format!("expected 3 layer widths, found {layers}")));
        }
        let w = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
        let shape = HeadShape { input: w(0), hidden: w(1), output: w(2) };
        if shape.input == 0 || shape.hidden == 0 || shape.output == 0 {
            return Err(Error::Format("zero layer width".into()));
        }
        let mut p = Self::zeros(shape);
        let count: usize = p.tensors().iter().map(|t| t.len()).sum();
        let expected = 20 + 4 * count;
        if bytes.len() != expected {
            return Err(Error::Truncated { expected: expected as u64, found: bytes.len() as u64 });
        }
        let mut values = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !p.is_finite() {
            return Err(Error::Format("non-finite head parameter".into()));
        }
        Ok(p)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    h: Array2<f64>,
    norms: Array1<f64>,
    z: Array2<f64>,
}

/// Symmetric InfoNCE over a batch of paired unit vectors, with its gradient
/// w.r.t. both sides.
pub fn info_nce(za: ArrayView2<f64>, zb: ArrayView2<f64>, temperature: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = za.nrows();
    let logits = za.dot(&zb.t()) / temperature;
    let (row_loss, row_soft) = softmax_ce(&logits);
    let logits_t = logits.t().to_owned();
    let (col_loss, col_soft) = softmax_ce(&logits_t);
    let loss = 0.5 * (row_loss + col_loss);
    // dL/dlogits = ((P_row − I) + (P_col − I)ᵀ) / (2n)
    let mut ds = row_soft + col_soft.t();
    for i in 0..n {
        ds[[i, i]] -= 2.0;
    }
    ds /= 2.0 * n as f64;
    let dza = ds.dot(&zb) / temperature;
    let dzb = ds.t().dot(&za) / temperature;
    (loss, dza, dzb)
}

/// Mean cross-entropy of each row against its diagonal entry, plus the
/// row-wise softmax.
fn softmax_ce(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut soft = logits.clone();
    let mut loss = 0.0;
    for (i, mut row) in soft.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        loss += sum.ln() + max - logits[[i, i]];
        row /= sum;
    }
    (loss / n as f64, soft)
}

/// Full training objective on one batch of pairs and its parameter gradient.
pub fn batch_loss_and_grad(
    params: &HeadParams,
    xa: ArrayView2<f64>,
    xb: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(LossParts, HeadGrads)> {
    let ca = params.forward_batch(xa)?;
    let cb = params.forward_batch(xb)?;
    let (align, mut dza, mut dzb) = info_nce(ca.z.view(), cb.z.view(), cfg.temperature);
    let mut koleo = 0.0;
    if cfg.koleo_weight > 0.0 {
        let (ka, ga) = koleo_loss_and_grad(ca.z.view())?;
        let (kb, gb) = koleo_loss_and_grad(cb.z.view())?;
        koleo = 0.5 * (ka + kb);
        dza.scaled_add(0.5 * cfg.koleo_weight, &ga);
        dzb.scaled_add(0.5 * cfg.koleo_weight, &gb);
    }
    let total = align + cfg.koleo_weight * koleo;
    let mut grads = params.backward(&ca, &dza);
    let gb = params.backward(&cb, &dzb);
    for (g, h) in grads.tensors_mut().into_iter().zip(gb.tensors()) {
        g.iter_mut().zip(h).for_each(|(a, b)| *a += b);
    }
    Ok((LossParts { align, koleo, total }, grads))
}

pub fn batch_loss(params: &HeadParams, xa: ArrayView2<f64>, xb: ArrayView2<f64>, cfg: &TrainConfig) -> Result<LossParts> {
    let za = params.forward_batch(xa)?.z;
    let zb = params.forward_batch(xb)?.z;
    let (align, _, _) = info_nce(za.view(), zb.view(), cfg.temperature);
    let koleo = if cfg.koleo_weight > 0.0 {
        0.5 * (crate::koleo::koleo_loss(za.view())? + crate::koleo::koleo_loss(zb.view())?)
    } else {
        0.0
    };
    Ok(LossParts { align, koleo, total: align + cfg.koleo_weight * koleo })
}

struct Adam {
    m: HeadParams,
    v: HeadParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: HeadShape) -> Self {
        Self { m: HeadParams::zeros(shape), v: HeadParams::zeros(shape), t: 0 }
    }

    fn step(&mut self, params: &mut HeadParams, grads: &HeadGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors());
        for (((p, m), v), g) in tensors {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a head on row-aligned view pairs `a[i] ↔ b[i]` with Adam.
pub fn train_head(a: &EmbeddingMatrix, b: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<(HeadParams, TrainReport)> {
    train_head_from(HeadParams::init(cfg.shape, cfg.seed), a, b, cfg, &mut std::io::sink())
}

/// Like [`train_head`] but starting from `params` and writing one progress
/// line per epoch to `log`.
pub fn train_head_from(
    mut params: HeadParams,
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(HeadParams, TrainReport)> {
    cfg.validate()?;
    if params.shape() != cfg.shape {
        return Err(invalid("initial parameters do not match the configured shape"));
    }
    if a.n() != b.n() || a.d() != b.d() {
        return Err(invalid("paired views must have identical shapes"));
    }
    if a.d() != cfg.shape.input {
        return Err(Error::DimensionMismatch { expected: cfg.shape.input, found: a.d() });
    }
    if a.n() < cfg.batch_size {
        return Err(invalid(format!("{} pairs is fewer than one batch of {}", a.n(), cfg.batch_size)));
    }
    let to_array = |m: &EmbeddingMatrix| {
        Array2::from_shape_vec((m.n(), m.d()), m.data().iter().map(|&v| v as f64).collect())
            .expect("shape matches data")
    };
    let (xa, xb) = (to_array(a), to_array(b));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..a.n()).collect();
    let mut adam = Adam::new(cfg.shape);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let ba = xa.select(Axis(0), idx);
            let bb = xb.select(Axis(0), idx);
            let (loss, grads) = batch_loss_and_grad(&params, ba.view(), bb.view(), cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {batches}: {loss:?}")));
            }
            adam.step(&mut params, &grads, cfg.learning_rate);
            acc.align += loss.align;
            acc.koleo += loss.koleo;
            acc.total += loss.total;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let mean = LossParts { align: acc.align / k, koleo: acc.koleo / k, total: acc.total / k };
        writeln!(log, "epoch {epoch:>3}  loss {:.5}  align {:.5}  koleo {:.5}", mean.total, mean.align, mean.koleo)
            .map_err(Error::Io)?;
        report.epochs.push(mean);
    }
    if !params.is_finite() {
        return Err(Error::Diverged("non-finite parameters after training".into()));
    }
    params.round_to_f32();
    Ok((params, report))
}

/// Draws a random input vector, used by tests and synthetic tooling.
pub fn random_input(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(koleo_weight: f64) -> TrainConfig {
        TrainConfig {
            shape: HeadShape { input: 6, hidden: 5, output: 4 },
            koleo_weight,
            temperature: 0.5,
            ..TrainConfig::default()
        }
    }

    fn rand_array(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        diff / scale.max(1e-12)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (trial, &lambda) in [0.0, 0.1, 1.0].iter().cycle().take(6).enumerate() {
            let cfg = small_cfg(lambda);
            let mut params = HeadParams::init(cfg.shape, trial as u64);
            params.b1.mapv_inplace(|_| rng.random_range(-0.1..0.1));
            params.b2.mapv_inplace(|_| rng.random_range(-0.1..0.1));
            let xa = rand_array(7, 6, &mut rng);
            let xb = &xa + &rand_array(7, 6, &mut rng).mapv(|v| 0.3 * v);
            let (_, grads) = batch_loss_and_grad(&params, xa.view(), xb.view(), &cfg).unwrap();
            let h = 1e-5;
            for t in 0..4 {
                let len = params.tensors()[t].len();
                let mut fd = vec![0.0; len];
                for (i, slot) in fd.iter_mut().enumerate() {
                    let mut p = params.clone();
                    p.tensors_mut()[t][i] += h;
                    let lp = batch_loss(&p, xa.view(), xb.view(), &cfg).unwrap().total;
                    p.tensors_mut()[t][i] -= 2.0 * h;
                    let lm = batch_loss(&p, xa.view(), xb.view(), &cfg).unwrap().total;
                    *slot = (lp - lm) / (2.0 * h);
                }
                let e = rel_err(grads.tensors()[t], &fd);
                assert!(e <= 1e-3, "trial {trial} tensor {t}: relative error {e}");
            }
        }
    }

    #[test]
    fn forward_output_is_unit_norm() {
        let shape = HeadShape::default();
        let p = HeadParams::init(shape, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<f32> = (0..1000).flat_map(|_| random_input(&mut rng, 512)).collect();
        let out = p.forward_matrix(&EmbeddingMatrix::new(1000, 512, rows).unwrap()).unwrap();
        for r in out.rows() {
            let norm: f64 = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn zero_weights_give_normalized_bias() {
        let shape = HeadShape { input: 8, hidden: 4, output: 3 };
        let mut p = HeadParams::zeros(shape);
        p.b2 = Array1::from(vec![3.0, 0.0, 4.0]);
        let out = p.forward(&[0.7; 8]).unwrap();
        assert_eq!(out, vec![0.6, 0.0, 0.8]);
        let p = HeadParams::zeros(shape);
        assert!(p.forward(&[1.0; 8]).is_err());
        assert!(HeadParams::init(shape, 1).forward(&[1.0; 7]).is_err());
    }

    #[test]
    fn forward_is_reproducible() {
        let a = HeadParams::init(HeadShape::default(), 77);
        let b = HeadParams::init(HeadShape::default(), 77);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(1), 512);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn serialization_round_trips() {
        let p = HeadParams::init(HeadShape { input: 10, hidden: 6, output: 3 }, 5);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"CBHD");
        assert_eq!(HeadParams::from_bytes(&bytes).unwrap(), p);
        assert!(HeadParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(HeadParams::from_bytes(&bad).is_err());
    }

    fn toy_pairs(n: usize, d: usize, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..n {
            let base = random_input(&mut rng, d);
            a.extend(base.iter().map(|v| v + rng.random_range(-0.05..0.05)));
            b.extend(base.iter().map(|v| v + rng.random_range(-0.05..0.05)));
        }
        (EmbeddingMatrix::new(n, d, a).unwrap(), EmbeddingMatrix::new(n, d, b).unwrap())
    }

    #[test]
    fn zero_koleo_weight_logs_no_koleo_term() {
        let (a, b) = toy_pairs(64, 16, 1);
        let cfg = TrainConfig {
            shape: HeadShape { input: 16, hidden: 12, output: 4 },
            koleo_weight: 0.0,
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (_, report) = train_head(&a, &b, &cfg).unwrap();
        assert!(report.epochs.iter().all(|e| e.koleo == 0.0 && e.total == e.align));
    }

    #[test]
    fn training_is_seeded_and_decreases_loss() {
        let (a, b) = toy_pairs(256, 16, 2);
        let cfg = TrainConfig {
            shape: HeadShape { input: 16, hidden: 32, output: 8 },
            epochs: 30,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (p1, r1) = train_head(&a, &b, &cfg).unwrap();
        let (p2, _) = train_head(&a, &b, &cfg).unwrap();
        assert_eq!(p1, p2);
        let first = r1.epochs[0].total;
        let last = r1.epochs.last().unwrap().total;
        assert!(last < first, "loss went from {first} to {last}");
        let window = |r: std::ops::Range<usize>| r1.epochs[r.clone()].iter().map(|e| e.total).sum::<f64>() / r.len() as f64;
        assert!(window(25..30) <= window(20..25));
    }

    #[test]
    fn rejects_bad_configs() {
        let (a, b) = toy_pairs(8, 16, 3);
        let mut cfg = TrainConfig { shape: HeadShape { input: 16, hidden: 4, output: 2 }, ..TrainConfig::default() };
        cfg.batch_size = 1;
        assert!(train_head(&a, &b, &cfg).is_err());
        cfg.batch_size = 16;
        assert!(train_head(&a, &b, &cfg).is_err(), "fewer pairs than one batch");
    }
}

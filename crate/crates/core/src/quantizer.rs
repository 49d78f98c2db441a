//! Per-dimension 8-bit scalar quantization.

use crate::catalog::{EmbeddingMatrix, QuantizationParams};
use crate::error::{invalid, Error, Result};

const MAX_CODE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    params: QuantizationParams,
}

impl Quantizer {
    pub fn new(params: QuantizationParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Fits `lo`/`hi` to the column minima and maxima of `data`.
    pub fn fit(data: &EmbeddingMatrix) -> Result<Self> {
        if data.n() == 0 {
            return Err(invalid("cannot fit a quantizer on an empty matrix"));
        }
        let d = data.d();
        let mut lo = vec![f32::INFINITY; d];
        let mut hi = vec![f32::NEG_INFINITY; d];
        for row in data.rows() {
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        Self::new(QuantizationParams::new(lo, hi)?)
    }

    pub fn params(&self) -> &QuantizationParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Width of one quantization step in dimension `j`.
    pub fn step(&self, j: usize) -> f64 {
        (self.params.hi[j] as f64 - self.params.lo[j] as f64) / MAX_CODE
    }

    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        let mut out = vec![0u8; self.dim()];
        self.encode_into(v, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, v: &[f32], out: &mut [u8]) -> Result<()> {
        self.check_dim(v.len())?;
        self.check_dim(out.len())?;
        for (j, (&x, o)) in v.iter().zip(out.iter_mut()).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite(j));
            }
            let lo = self.params.lo[j] as f64;
            let span = self.params.hi[j] as f64 - lo;
            *o = if span == 0.0 {
                0
            } else {
                // f64::round rounds half away from zero.
                ((x as f64 - lo) / span * MAX_CODE).round().clamp(0.0, MAX_CODE) as u8
            };
        }
        Ok(())
    }

    pub fn decode(&self, code: &[u8]) -> Result<Vec<f32>> {
        self.check_dim(code.len())?;
        Ok(code
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let lo = self.params.lo[j] as f64;
                let span = self.params.hi[j] as f64 - lo;
                (lo + c as f64 / MAX_CODE * span) as f32
            })
            .collect())
    }

    /// Encodes every row of `data` into one contiguous code buffer.
    pub fn encode_matrix(&self, data: &EmbeddingMatrix) -> Result<Vec<u8>> {
        self.check_dim(data.d())?;
        let mut codes = vec![0u8; data.n() * self.dim()];
        for (row, out) in data.rows().zip(codes.chunks_exact_mut(self.dim())) {
            self.encode_into(row, out)?;
        }
        Ok(codes)
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found });
        }
        Ok(())
    }
}

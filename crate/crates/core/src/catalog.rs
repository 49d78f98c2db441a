//! Quantized catalog storage.
//!
//! A catalog is two files that share a stem:
//!
//! * the binary code file (`CBRX` magic), holding the quantization parameters
//!   and the `n × d′` byte matrix, little-endian and row-major;
//! * a JSON-lines metadata sidecar (`<code file>.meta.jsonl`), one record per
//!   row in row order.
//!
//! The header can be parsed on its own with [`read_header`] so index and model
//! tooling never has to touch the metadata.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const CATALOG_MAGIC: &[u8; 4] = b"CBRX";
pub const CATALOG_VERSION: u16 = 1;
/// Number of quantization levels; codes are single bytes.
pub const LEVELS: u16 = 256;

/// Row-major `n × d` matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("embedding dimensionality must be at least 1"));
        }
        if data.len() != n * d {
            return Err(invalid(format!(
                "embedding data has {} values, expected {n}×{d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(invalid("ragged rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d)
    }

    /// Reads a headerless little-endian `f32` file holding rows of width `d`.
    pub fn read_f32_file(path: impl AsRef<Path>, d: usize) -> Result<Self> {
        let bytes = fs::read(path)?;
        let row_bytes = d * 4;
        if d == 0 || bytes.len() % row_bytes != 0 {
            return Err(Error::Format(format!(
                "f32 file of {} bytes is not a whole number of {d}-wide rows",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>();
        Self::new(bytes.len() / row_bytes, d, data)
    }

    pub fn write_f32_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-dimension affine ranges of an 8-bit scalar quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationParams {
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl QuantizationParams {
    pub fn new(lo: Vec<f32>, hi: Vec<f32>) -> Result<Self> {
        let params = Self { lo, hi };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn levels(&self) -> u16 {
        LEVELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(invalid(format!(
                "quantization ranges have {} lows and {} highs",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (j, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(invalid(format!("bad quantization range [{l}, {h}] in dim {j}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogRecord {
    pub id: u64,
    pub uri: String,
    /// Ground-truth class, only consumed by evaluation.
    #[serde(default)]
    pub label: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCatalog {
    pub params: QuantizationParams,
    pub codes: Vec<u8>,
    pub records: Vec<CatalogRecord>,
}

impl QuantizedCatalog {
    pub fn new(params: QuantizationParams, codes: Vec<u8>, records: Vec<CatalogRecord>) -> Result<Self> {
        let catalog = Self { params, codes, records };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn code(&self, row: usize) -> &[u8] {
        let d = self.dim();
        &self.codes[row * d..(row + 1) * d]
    }

    pub fn code_rows(&self) -> std::slice::ChunksExact<'_, u8> {
        self.codes.chunks_exact(self.dim())
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let expected = self.records.len() * self.dim();
        if self.codes.len() != expected {
            return Err(invalid(format!(
                "catalog holds {} code bytes for {} records of width {}",
                self.codes.len(),
                self.records.len(),
                self.dim()
            )));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.uri.is_empty() {
                return Err(invalid(format!("record {} has an empty uri", r.id)));
            }
            if !seen.insert(r.id) {
                return Err(invalid(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    /// Serialized code file contents.
    pub fn encode_code_file(&self) -> Vec<u8> {
        let d = self.dim();
        let mut buf = Vec::with_capacity(header_len(d) + self.codes.len());
        buf.extend_from_slice(CATALOG_MAGIC);
        buf.extend_from_slice(&CATALOG_VERSION.to_le_bytes());
        buf.extend_from_slice(&(d as u16).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&LEVELS.to_le_bytes());
        for v in self.params.lo.iter().chain(&self.params.hi) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.codes);
        buf
    }

    /// Serialized metadata sidecar contents.
    pub fn encode_metadata(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        Ok(buf)
    }
}

/// Fixed-size part of the code file, parseable without the code section.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogHeader {
    pub version: u16,
    pub n: u64,
    pub params: QuantizationParams,
}

impl CatalogHeader {
    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn byte_len(&self) -> usize {
        header_len(self.dim())
    }
}

pub fn header_len(dim: usize) -> usize {
    4 + 2 + 2 + 8 + 2 + 8 * dim
}

pub fn metadata_path(code_path: impl AsRef<Path>) -> PathBuf {
    let mut os = code_path.as_ref().as_os_str().to_owned();
    os.push(".meta.jsonl");
    PathBuf::from(os)
}

pub fn write_catalog(catalog: &QuantizedCatalog, path: impl AsRef<Path>) -> Result<()> {
    catalog.validate()?;
    let path = path.as_ref();
    write_atomic(path, &catalog.encode_code_file())?;
    write_atomic(&metadata_path(path), &catalog.encode_metadata()?)?;
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<CatalogHeader> {
    const FIXED: usize = 18;
    if bytes.len() < 4 || &bytes[..4] != CATALOG_MAGIC {
        return Err(Error::Format("not a catalog code file (bad magic)".into()));
    }
    if bytes.len() < FIXED {
        return Err(Error::Truncated { expected: FIXED as u64, found: bytes.len() as u64 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CATALOG_VERSION {
        return Err(Error::Format(format!("unsupported catalog version {version}")));
    }
    let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let levels = u16::from_le_bytes([bytes[16], bytes[17]]);
    if levels != LEVELS {
        return Err(Error::Format(format!("expected {LEVELS} levels, header says {levels}")));
    }
    if dim == 0 {
        return Err(Error::Format("zero code dimensionality".into()));
    }
    let full = header_len(dim);
    if bytes.len() < full {
        return Err(Error::Truncated { expected: full as u64, found: bytes.len() as u64 });
    }
    let floats = bytes[FIXED..full]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<_>>();
    let (lo, hi) = floats.split_at(dim);
    let params = QuantizationParams::new(lo.to_vec(), hi.to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(CatalogHeader { version, n, params })
}

/// Reads only the header of a code file.
pub fn read_header(path: impl AsRef<Path>) -> Result<CatalogHeader> {
    let mut f = File::open(path)?;
    let mut fixed = vec![0u8; 18];
    let got = read_up_to(&mut f, &mut fixed)?;
    fixed.truncate(got);
    if got < 18 {
        return parse_header(&fixed);
    }
    let dim = u16::from_le_bytes([fixed[6], fixed[7]]) as usize;
    let mut rest = vec![0u8; header_len(dim) - 18];
    let got_rest = read_up_to(&mut f, &mut rest)?;
    fixed.extend_from_slice(&rest[..got_rest]);
    parse_header(&fixed)
}

fn read_up_to(f: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match f.read(&mut buf[filled..])? {
            0 => break,
            k => filled += k,
        }
    }
    Ok(filled)
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<QuantizedCatalog> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let header = parse_header(&bytes)?;
    let start = header.byte_len() as u64;
    let code_bytes = header
        .n
        .checked_mul(header.dim() as u64)
        .ok_or_else(|| Error::Format("declared row count overflows".into()))?;
    let expected = start + code_bytes;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after the code section",
            found - expected
        )));
    }
    let codes = bytes[start as usize..].to_vec();
    let records = read_metadata(&metadata_path(path))?;
    if records.len() as u64 != header.n {
        return Err(Error::Format(format!(
            "header declares {} rows but metadata has {} records",
            header.n,
            records.len()
        )));
    }
    QuantizedCatalog::new(header.params, codes, records).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_metadata(path: &Path) -> Result<Vec<CatalogRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

pub fn write_metadata(path: &Path, records: &[CatalogRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Bytes needed for raw `f32` embeddings of width `d_in` over bytes needed
/// for 8-bit codes of width `d_out`.
pub fn storage_reduction_factor(d_in: usize, d_out: usize) -> Result<f64> {
    if d_in == 0 || d_out == 0 {
        return Err(invalid("dimensions must be at least 1"));
    }
    Ok((d_in * 4) as f64 / d_out as f64)
}

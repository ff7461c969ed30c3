//! On-disk artifacts: tensor dumps, checkpoints and CSV traces.
//!
//! Tensors and checkpoints share one layout: an 8-byte magic, a `u32`
//! little-endian header length, a UTF-8 JSON header, then the payload as
//! little-endian `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nudiff_core::score::{Activation, Mlp, Preconditioning};

pub const TENSOR_MAGIC: &[u8; 8] = b"NDTENSOR";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NDCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), "tensor shape {shape:?} holds {n} values, got {}", data.len());
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `model` for single-range runs, `scale_i` for multi-scale runs.
    pub role: String,
    /// `raw` or `ema`.
    pub weights: String,
    pub dim: usize,
    pub cond_dim: usize,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub preconditioning: Preconditioning,
    pub config_hash: String,
    pub seed: u64,
}

fn write_framed(path: &Path, magic: &[u8; 8], header: &impl Serialize, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let len = u32::try_from(header.len()).context("header too large")?;
    let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&header)?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_framed<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let what = path.display();
    ensure!(bytes.len() >= 12 && &bytes[..8] == magic, "{what}: not a {} file", String::from_utf8_lossy(magic));
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    ensure!(bytes.len() >= 12 + len, "{what}: truncated header");
    let header = serde_json::from_slice(&bytes[12..12 + len]).with_context(|| format!("{what}: bad header"))?;
    let body = &bytes[12 + len..];
    ensure!(body.len() % 8 == 0, "{what}: payload is not a whole number of f64 values");
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let header = TensorHeader {
        dtype: "f64".into(),
        shape: tensor.shape.clone(),
        layout: "row_major".into(),
    };
    write_framed(path, TENSOR_MAGIC, &header, &tensor.data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let (header, data): (TensorHeader, _) = read_framed(path, TENSOR_MAGIC)?;
    if header.dtype != "f64" || header.layout != "row_major" {
        bail!("{}: unsupported tensor encoding {}/{}", path.display(), header.dtype, header.layout);
    }
    Tensor::new(header.shape, data).with_context(|| format!("{}", path.display()))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, mlp: &Mlp) -> Result<()> {
    write_framed(path, CHECKPOINT_MAGIC, header, mlp.params())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Mlp)> {
    let (h, params): (CheckpointHeader, Vec<f64>) = read_framed(path, CHECKPOINT_MAGIC)?;
    let mlp = Mlp::from_parts(h.dim, h.cond_dim, h.sizes.clone(), h.activation, params)
        .with_context(|| format!("{}: inconsistent network", path.display()))?;
    Ok((h, mlp))
}

/// Hex SHA-256 of the configuration text.
pub fn config_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// 64-bit seed for a named sub-task of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// CSV file whose first line is `# config_hash=...,seed=...`.
pub fn csv_writer(path: &Path, config_hash: &str, seed: u64) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# config_hash={config_hash},seed={seed}")?;
    Ok(csv::Writer::from_writer(w))
}

/// Numeric rows of a headerless CSV file; `#` starts a comment line.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

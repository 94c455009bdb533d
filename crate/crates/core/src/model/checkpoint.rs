//! Checkpoint container.
//!
//! Layout: the 8-byte magic `GEOSAMCK`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then every tensor as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::raster::ClassCatalog;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GEOSAMCK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Frozen,
    Trainable,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the payload, in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub catalog: ClassCatalog,
    /// Fully resolved run configuration.
    pub run_config: serde_json::Value,
    /// Trainer bookkeeping (step, epoch, seed, best metric, ...).
    pub state: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Array2<f64>>,
}

impl Checkpoint {
    pub fn new(
        model: ModelConfig,
        catalog: ClassCatalog,
        run_config: serde_json::Value,
        state: serde_json::Value,
        tensors: Vec<(String, TensorKind, Array2<f64>)>,
    ) -> Self {
        let mut offset = 0;
        let mut metas = Vec::with_capacity(tensors.len());
        let mut data = Vec::with_capacity(tensors.len());
        for (name, kind, value) in tensors {
            let (rows, cols) = value.dim();
            metas.push(TensorMeta {
                name,
                kind,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
            data.push(value);
        }
        Self {
            header: CheckpointHeader {
                model,
                catalog,
                run_config,
                state,
                tensors: metas,
            },
            data,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorMeta, &Array2<f64>)> {
        self.header
            .tensors
            .iter()
            .position(|m| m.name == name)
            .map(|i| (&self.header.tensors[i], &self.data[i]))
    }

    pub fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = (&TensorMeta, &Array2<f64>)> {
        self.header
            .tensors
            .iter()
            .zip(&self.data)
            .filter(move |(m, _)| m.kind == kind)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload: usize = self.data.iter().map(|a| a.len()).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + 8 * payload);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for a in &self.data {
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let body = buf
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &buf[20 + hlen..];
        let mut data = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for m in &header.tensors {
            if m.offset != expected {
                return Err(bad(format!("tensor `{}` has offset {} (expected {expected})", m.name, m.offset)));
            }
            let n = m.rows * m.cols;
            let bytes = payload
                .get(8 * m.offset..8 * (m.offset + n))
                .ok_or_else(|| bad(format!("payload truncated at tensor `{}`", m.name)))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data.push(Array2::from_shape_vec((m.rows, m.cols), values).expect("sized"));
            expected += n;
        }
        if payload.len() != 8 * expected {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::at(dir, e.into()))?;
        }
        // Write then rename so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::at(&tmp, e.into()))?;
        fs::rename(&tmp, path).map_err(|e| Error::at(path, e.into()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::at(path, e.into()))?;
        Self::from_bytes(&buf).map_err(|e| Error::at(path, e))
    }
}

//! Binary checkpoints and the CSV metrics trace.
//!
//! Layout (little-endian): magic `AROC`, `u32` version, `u64` step, `u32`
//! length + UTF-8 JSON metadata (head kind, dims, config echo), `u32` block
//! count, then per block: `u32` name length + name, `u32` rows, `u32` cols,
//! `rows*cols` `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{HeadKind, ProjectionModel};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AROC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub head: HeadKind,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub meta: CheckpointMeta,
    pub model: ProjectionModel,
}

impl Checkpoint {
    pub fn new(model: ProjectionModel, step: u64, config: serde_json::Value) -> Self {
        let meta = CheckpointMeta {
            head: model.img.kind(),
            d_in: model.d_in(),
            d_out: model.d_out(),
            config,
        };
        Self { step, meta, model }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let blocks = self.model.blocks();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for b in blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.rows as u32).to_le_bytes());
            out.extend_from_slice(&(b.cols as u32).to_le_bytes());
            for v in b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut model = ProjectionModel::init(meta.head, meta.d_in, meta.d_out, &mut SplitMix64::new(0));
        let count = r.u32()? as usize;
        let mut targets = model.blocks_mut();
        if count != targets.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} blocks, model expects {}",
                targets.len()
            )));
        }
        for target in targets.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("block name is not utf-8".into()))?
                .to_string();
            if name != target.name {
                return Err(Error::Format(format!("expected block {}, found {name}", target.name)));
            }
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if rows * cols != target.values.len() {
                return Err(Error::DimMismatch {
                    expected: target.values.len(),
                    found: rows * cols,
                });
            }
            for v in target.values.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            }
        }
        drop(targets);
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { step, meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// One row of the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_r1: Option<f64>,
}

pub fn write_trace(rows: &[TraceRow], writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

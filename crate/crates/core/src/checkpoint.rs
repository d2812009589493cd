//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8     magic "EVPINOCP"
//! bytes 8..12    format version (u32) = 1
//! bytes 12..16   metadata length M (u32)
//! bytes 16..16+M metadata as JSON: operator config, vehicle spec,
//!                scaler statistics, smoothing settings, window stride,
//!                training sample rate, best validation loss, epoch
//! next 4         record count (u32)
//! per record     name length (u16), name (UTF-8),
//!                rank (u8), dims (u32 × rank), values (f64 × numel)
//! ```
//!
//! Writes go through a temp file in the target directory followed by a
//! rename, so a crash never leaves a torn checkpoint behind.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Scaler;
use crate::error::{Error, Result};
use crate::operator::{OperatorConfig, OperatorModel};
use crate::physics::VehicleSpec;

const MAGIC: &[u8; 8] = b"EVPINOCP";
const VERSION: u32 = 1;

/// Everything needed to rebuild the model and run it on new logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub operator: OperatorConfig,
    pub vehicle: VehicleSpec,
    pub scaler: Scaler,
    /// Smoothing window span in seconds (resolved per log rate).
    pub sg_span_s: f64,
    pub sg_order: usize,
    pub stride: usize,
    /// Sample rate the model was trained at, Hz.
    pub fs: f64,
    pub best_val_loss: f64,
    pub epoch: usize,
}

pub fn save_checkpoint(path: &Path, model: &OperatorModel, meta: &CheckpointMeta) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("metadata encode: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.tensor().shape().to_vec();
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        p.tensor().with_data(|d| {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(OperatorModel, CheckpointMeta)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata decode: {e}")))?;

    let model = OperatorModel::new(meta.operator, 0)?;
    let n_records = cur.u32()? as usize;
    let params = model.params();
    if n_records != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {n_records} tensors, model expects {}",
            params.len()
        )));
    }
    let mut filled = 0usize;
    for _ in 0..n_records {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = cur.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let param = params
            .iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
        if param.tensor().shape() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                dims,
                param.tensor().shape()
            )));
        }
        param.tensor().set_data(&data)?;
        filled += 1;
    }
    if filled != params.len() {
        return Err(Error::Checkpoint("missing tensors in checkpoint".into()));
    }
    Ok((model, meta))
}

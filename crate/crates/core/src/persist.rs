//! Binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DCTL"            4 bytes magic
//! 0x01              version
//! L, K, N           u32 each
//! T_1 .. T_L        L blocks of K*K f64, row-major
//! len               u32, byte length of the JSON blob
//! blob              UTF-8 JSON: {"config", "num_samples", "training_trace"}
//! crc               u32, CRC-32 of every preceding byte
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::conv::KernelBank;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TraceEntry, TrainedModel};

pub const MAGIC: &[u8; 4] = b"DCTL";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    num_samples: usize,
    training_trace: Vec<TraceEntry>,
}

pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let l = model.transforms.len();
    let k = model.config.num_kernels;
    let n = model.signal_len();
    let mut out = Vec::with_capacity(HEADER_LEN + l * k * k * 8 + 64);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [l, k, n] {
        let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for bank in &model.transforms {
        if bank.size() != k {
            return Err(Error::Malformed(format!("transform of size {} in a K={k} model", bank.size())));
        }
        for i in 0..k {
            for j in 0..k {
                out.extend_from_slice(&bank.matrix()[(i, j)].to_le_bytes());
            }
        }
    }
    let blob = serde_json::to_vec(&Metadata {
        config: model.config.clone(),
        num_samples: model.data_dims.0,
        training_trace: model.training_trace.clone(),
    })?;
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated("magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = *bytes.get(4).ok_or(Error::Truncated("version"))?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER_LEN + 4 + 4 {
        return Err(Error::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 5 };
    let l = cur.u32("layer count")? as usize;
    let k = cur.u32("kernel count")? as usize;
    let n = cur.u32("signal length")? as usize;
    let mut transforms = Vec::with_capacity(l.min(1024));
    for _ in 0..l {
        let mut m = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = cur.f64("transforms")?;
            }
        }
        transforms.push(KernelBank::new(m).map_err(|e| Error::Malformed(e.to_string()))?);
    }
    let len = cur.u32("metadata length")? as usize;
    let blob = cur.take(len, "metadata")?;
    if cur.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - cur.pos)));
    }
    let meta: Metadata = serde_json::from_slice(blob)?;
    if meta.config.num_layers != l || meta.config.num_kernels != k {
        return Err(Error::Malformed(format!(
            "header says L={l}, K={k} but config says L={}, K={}",
            meta.config.num_layers, meta.config.num_kernels
        )));
    }
    Ok(TrainedModel {
        transforms,
        config: meta.config,
        training_trace: meta.training_trace,
        data_dims: (meta.num_samples, n),
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    model_from_bytes(&std::fs::read(path)?)
}

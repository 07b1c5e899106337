//! Checkpoints: a versioned header, JSON metadata (model config and
//! optional channel statistics), then named f64 tensors.
//!
//! Layout, little-endian: magic `CSVITCK1`, u32 version, u32 metadata
//! length, metadata bytes, u32 tensor count, and per tensor: u32 name
//! length, name, u32 ndim, u32 dims, f64 values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use csvit_core::tokenizer::ChannelStats;

use crate::config::ModelConfig;
use crate::error::{NnError, Result};
use crate::params::ModelParams;

const MAGIC: &[u8; 8] = b"CSVITCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub stats: Option<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        let tensors = self.params.tensors();
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
        meta.model.validate()?;
        let mut params = ModelParams::zeros(&meta.model);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()?;
        if count != expected.len() {
            return Err(NnError::Checkpoint(format!(
                "{count} tensors, config implies {}",
                expected.len()
            )));
        }
        for ((name, shape), mut dst) in expected.iter().zip(params.tensors_mut()) {
            let n = r.u32()?;
            let got = String::from_utf8_lossy(r.take(n)?).into_owned();
            if &got != name {
                return Err(NnError::Checkpoint(format!("expected tensor {name}, found {got}")));
            }
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(NnError::Checkpoint(format!("{name}: shape {dims:?}, expected {shape:?}")));
            }
            let raw = r.take(dst.len() * 8)?;
            for (v, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

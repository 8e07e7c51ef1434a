//! Versioned binary container for trained weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       "COPROPCKPT1"           11 bytes
//! version     u32
//! meta_len    u64
//! meta        JSON {kind, config, training_meta}
//! count       u32
//! count x     name_len u16, name utf-8, dtype u8 (0 = f64, 1 = f32),
//!             ndim u8, dims u64 x ndim, offset u64 (into the data section)
//! data        packed tensor values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 11] = b"COPROPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u64,
    pub lr: f64,
    /// Last losses of the run, oldest first.
    pub loss_tail: Vec<f64>,
    /// Earlier training stages this checkpoint descends from, oldest first.
    pub lineage: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    training_meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    /// Model family, e.g. "keyframe" or "propagator".
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: TrainingMeta,
    pub weights: BTreeMap<String, Tensor<S>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_value<S: Scalar>(dtype: DType, b: &[u8]) -> S {
    match dtype {
        DType::F64 => S::from_f64_lossy(f64::from_le_bytes(b.try_into().unwrap())),
        DType::F32 => S::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64),
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            training_meta: self.meta.clone(),
        };
        let meta = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.weights {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(S::DTYPE.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.len() * S::DTYPE.size()) as u64;
        }
        for t in self.weights.values() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::json("checkpoint header", e))?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype {tag}")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            index.push((name, dtype, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut weights = BTreeMap::new();
        for (name, dtype, shape, offset) in index {
            let n: usize = shape.iter().product();
            let size = dtype.size();
            let end = offset
                .checked_add(n * size)
                .filter(|&e| e <= data.len())
                .ok_or_else(|| Error::Checkpoint(format!("{name}: data out of bounds")))?;
            let values: Vec<S> = data[offset..end].chunks_exact(size).map(|b| read_value(dtype, b)).collect();
            weights.insert(name, Tensor::from_vec(&shape, values));
        }
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            meta: header.training_meta,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the checkpoint holds a model of family `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}

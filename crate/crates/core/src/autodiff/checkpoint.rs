//! Versioned binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "SCSGCKPT"
//! version    u32 LE    currently 1
//! meta_len   u32 LE    length of the UTF-8 JSON metadata object that follows
//! meta       bytes     {"key": "value", ...}
//! count      u32 LE    number of tensor entries
//! entry*     path_len u32 | path UTF-8 | ndim u32 | dims u32 * ndim | f32 LE * numel
//! ```
//!
//! Entries are written in the order given; readers match entries by path.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no entry for parameter `{0}`")]
    Missing(String),
    #[error("parameter `{path}` has shape {expected:?} but checkpoint stores {found:?}")]
    Shape { path: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &[Parameter]) -> Self {
        Self {
            meta: BTreeMap::new(),
            entries: params.iter().map(|p| (p.path.clone(), Tensor::new(p.tensor.shape(), p.tensor.data().to_vec()))).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| t)
    }

    /// Copies stored values into `params`, matching by path. Trainable flags
    /// and gradients are left untouched.
    pub fn restore_into(&self, params: &mut [Parameter]) -> Result<(), CheckpointError> {
        let index: BTreeMap<&str, &Tensor> = self.entries.iter().map(|(p, t)| (p.as_str(), t)).collect();
        for p in params.iter_mut() {
            let t = index.get(p.path.as_str()).ok_or_else(|| CheckpointError::Missing(p.path.clone()))?;
            if t.shape() != p.tensor.shape() {
                return Err(CheckpointError::Shape { path: p.path.clone(), expected: p.tensor.shape().to_vec(), found: t.shape().to_vec() });
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (path, t) in &self.entries {
            w.write_all(&(path.len() as u32).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta).map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut path = vec![0u8; len];
            r.read_exact(&mut path)?;
            let path = String::from_utf8(path).map_err(|_| CheckpointError::Corrupt(format!("entry {i}: path is not UTF-8")))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("entry `{path}`: {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push((path, Tensor::new(shape, data)));
        }
        Ok(Self { meta, entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// SHA-256 over the tensor payload only (paths, shapes, values); metadata
    /// does not affect the hash.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (path, t) in &self.entries {
            h.update(path.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Paths whose stored bytes differ between `self` and `other`, with the
    /// number of differing scalars in each.
    pub fn diff(&self, other: &Checkpoint) -> Vec<(String, usize)> {
        let theirs: BTreeMap<&str, &Tensor> = other.entries.iter().map(|(p, t)| (p.as_str(), t)).collect();
        self.entries
            .iter()
            .filter_map(|(p, t)| {
                let n = match theirs.get(p.as_str()) {
                    Some(o) if o.shape() == t.shape() => t.data().iter().zip(o.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count(),
                    _ => t.numel(),
                };
                (n > 0).then(|| (p.clone(), n))
            })
            .collect()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

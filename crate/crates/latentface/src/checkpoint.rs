//! The `LFCK` tensor container used for checkpoints, latent packs and
//! feature packs.
//!
//! Layout, little-endian throughout:
//! `"LFCK"`, `u32` version, `u64` metadata length, UTF-8 JSON metadata, `u32`
//! tensor count, then per tensor `u32` name length, name bytes, `u32` rank,
//! `u64` per dimension, `u64` byte length and raw `f32` data; a `u32` CRC32 of
//! every preceding byte closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use latentface_core::params::ParamSet;
use latentface_core::Tensor;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;

/// Named `f32` tensors plus free-form JSON metadata. Tensor order is by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self { metadata: Value::Object(Default::default()), tensors: BTreeMap::new() }
    }
}

impl Checkpoint {
    pub fn new(metadata: Value) -> Self {
        Self { metadata, tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::data(format!("checkpoint has no tensor `{name}`")))
    }

    /// Stores every parameter under `prefix`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for (name, t) in params.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Collects tensors whose names start with `prefix`, stripping it.
    pub fn params(&self, prefix: &str) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            match name.strip_prefix(prefix) {
                Some(rest) => out.insert(rest, t.clone()),
                None => break,
            }
        }
        out
    }

    /// String field of the metadata object.
    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(Value::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::data("not an LFCK container"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::data("checksum mismatch; the file is corrupt or truncated"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported container version {version}")));
        }
        let meta_len = r.len()?;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::data(format!("bad metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::data("tensor name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let bytes = r.len()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(bytes) {
                return Err(Error::data(format!("tensor `{name}`: byte length {bytes} disagrees with shape {shape:?}")));
            }
            let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
                return Err(Error::data(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::data("trailing bytes after the tensor directory"));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Hex SHA-256 of a file, used to tie derived artifacts to their stage-1 parent.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::data("truncated container"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::data("length exceeds address space"))
    }
}

//! Portable tensor files and named-tensor checkpoints.
//!
//! Tensor file layout: magic `FTNS`, version `u16`, rank `u32`, dims as
//! `u64` little-endian, then the payload as `f32` little-endian (values are
//! narrowed to 32-bit on disk and widened on load).
//!
//! A checkpoint is a container of `(name → tensor)` entries: magic `FTCK`,
//! version `u16`, entry count `u32`, a manifest of `(name, offset, length)`
//! records sorted by name, then the tensor blobs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;
use crate::{NumericsError, Result};

const TENSOR_MAGIC: &[u8; 4] = b"FTNS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"FTCK";
const VERSION: u16 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericsError::Format(format!(
            "bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"
        )));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(NumericsError::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(NumericsError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    Tensor::new(shape, data).map_err(|e| NumericsError::Format(e.to_string()))
}

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to Vec cannot fail");
    out
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_tensor(&mut f, t)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut f = std::fs::File::open(path)?;
    read_tensor(&mut f)
}

/// Named tensor container with deterministic (name-sorted) layout.
#[derive(Default, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: Vec<(&String, Vec<u8>)> = self
            .entries
            .iter()
            .map(|(name, t)| (name, tensor_bytes(t)))
            .collect();
        let manifest_len: usize = blobs.iter().map(|(n, _)| 4 + n.len() + 8 + 8).sum();
        let header_len = 4 + 2 + 4 + manifest_len;
        let mut out = Vec::with_capacity(header_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, blob) in &blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            offset += blob.len() as u64;
        }
        for (_, blob) in &blobs {
            out.extend_from_slice(blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NumericsError::Format(format!(
                "bad checkpoint magic {magic:?}"
            )));
        }
        let mut b2 = [0u8; 2];
        cur.read_exact(&mut b2)?;
        if u16::from_le_bytes(b2) != VERSION {
            return Err(NumericsError::Format("unsupported checkpoint version".into()));
        }
        let mut b4 = [0u8; 4];
        cur.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut manifest = Vec::with_capacity(count);
        let mut b8 = [0u8; 8];
        for _ in 0..count {
            cur.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| NumericsError::Format("non-utf8 entry name".into()))?;
            cur.read_exact(&mut b8)?;
            let offset = u64::from_le_bytes(b8) as usize;
            cur.read_exact(&mut b8)?;
            let len = u64::from_le_bytes(b8) as usize;
            manifest.push((name, offset, len));
        }
        let mut entries = BTreeMap::new();
        for (name, offset, len) in manifest {
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| NumericsError::Format(format!("entry '{name}' out of bounds")))?;
            let mut slice = &bytes[offset..end];
            entries.insert(name, read_tensor(&mut slice)?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized container, as lowercase hex.
    pub fn hash_hex(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//! `"GCCKPT01"` magic, `u32` version, `u32` metadata length + UTF-8 metadata,
//! `u32` tensor count, then per tensor: `u32` name length + name bytes,
//! `u32` rank, `u64` per dimension, and the `f64` payload.

use std::io::{Read, Write};

use crate::autodiff::ParamStore;
use crate::error::{format_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GCCKPT01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.metadata)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(format_err("checkpoint", "bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format_err("checkpoint", format!("unsupported version {version}")));
        }
        let metadata = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(truncated)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    /// Copies tensors into `store`, matching by name and shape. Every stored
    /// parameter must be present in the checkpoint.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::MissingKey(format!("checkpoint parameter {name:?} not in model")))?;
            if store.value(id).shape() != t.shape() {
                return Err(shape_err(
                    "checkpoint",
                    format!("{name}: model {:?} vs checkpoint {:?}", store.value(id).shape(), t.shape()),
                ));
            }
        }
        if self.tensors.len() != store.len() {
            let missing: Vec<_> = store
                .iter()
                .filter(|(_, p)| !self.tensors.iter().any(|(n, _)| n == &p.name))
                .map(|(_, p)| p.name.clone())
                .collect();
            return Err(Error::MissingKey(format!("parameters absent from checkpoint: {missing:?}")));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked above");
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        format_err("checkpoint", "truncated file")
    } else {
        Error::Io(e)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| format_err("checkpoint", e.to_string()))
}

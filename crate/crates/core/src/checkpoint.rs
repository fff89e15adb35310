//! Versioned binary parameter checkpoints.
//!
//! Layout (little-endian): `MUVAECKP`, `u32` version, `u8` precision tag,
//! `u32` tensor count, then per tensor a `u32`-length UTF-8 name, `u32` rank,
//! `u64` dims and raw element data; finally a SHA-256 digest of everything
//! before it.

use std::path::Path;

use muvae_autodiff::{ParamStore, Precision, Real, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MUVAECKP";
pub const VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const DIGEST_LEN: usize = 32;

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

fn push_scalar<S: Real>(out: &mut Vec<u8>, v: S) {
    match S::PRECISION {
        Precision::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
        Precision::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
    }
}

/// Serializes named stores; each tensor is stored as `<group>/<name>`.
pub fn encode<S: Real>(groups: &[(&str, &ParamStore<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision_tag(S::PRECISION));
    let count: usize = groups.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (group, store) in groups {
        for p in store.iter() {
            let name = format!("{group}/{}", p.name);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                push_scalar(&mut out, v);
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "checkpoint truncated"))?;
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

    fn scalar<S: Real>(&mut self) -> Result<S> {
        Ok(match S::PRECISION {
            Precision::F32 => S::from_f64(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64),
            Precision::F64 => S::from_f64(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))),
        })
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode<S: Real>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity(format!("{}: checkpoint digest mismatch", path.display())));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("checkpoint version {version}, expected {VERSION}")));
    }
    let tag = r.take(1)?[0];
    if tag != precision_tag(S::PRECISION) {
        return Err(Error::format(
            path,
            format!("checkpoint precision tag {tag} does not match {}", S::PRECISION),
        ));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(path, "tensor dims overflow"))?;
        let data = (0..n).map(|_| r.scalar()).collect::<Result<Vec<S>>>()?;
        let t = Tensor::new(dims, data).map_err(|e| Error::format(path, e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Collects the tensors under `group/` into a fresh store, preserving order.
pub fn group_store<S: Real>(tensors: &[(String, Tensor<S>)], group: &str) -> Result<ParamStore<S>> {
    let prefix = format!("{group}/");
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(&prefix) {
            store.add(rest, t.clone())?;
        }
    }
    Ok(store)
}

pub fn save<S: Real>(path: &Path, groups: &[(&str, &ParamStore<S>)]) -> Result<()> {
    std::fs::write(path, encode(groups)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Real>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

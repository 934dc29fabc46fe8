//! The SCLR tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "SCLR"
//! version   u32      currently 1
//! count     u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8      0 = f32, 1 = f64
//!   rank     u32
//!   dims     rank × u64
//!   values   product(dims) × (4 | 8) bytes
//! checksum  u64      FNV-1a over every preceding byte
//! ```

use std::collections::HashSet;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SCLR";
pub const VERSION: u32 = 1;

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serializes named tensors. Names must be unique.
pub fn encode<S: Scalar>(tensors: &[(String, &Tensor<S>)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(S::DTYPE.code());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.reserve(t.numel() * S::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
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

/// Parses a container, verifying magic, version, checksum and that every
/// tensor has dtype `S`. There is no silent precision conversion.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    if bytes.len() < 4 + 4 + 4 + 8 {
        return Err(Error::Format("truncated container".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let code = r.take(1)?[0];
        let dtype = Dtype::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if dtype != S::DTYPE {
            return Err(Error::Dtype {
                name,
                found: dtype.name(),
                expected: S::DTYPE.name(),
            });
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
            numel = numel.checked_mul(d).ok_or_else(|| Error::Format("dimension overflow".into()))?;
            shape.push(d);
        }
        let size = dtype.size();
        let raw = r.take(numel.checked_mul(size).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data = raw.chunks_exact(size).map(S::read_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes before checksum".into()));
    }
    Ok(out)
}

pub fn save<S: Scalar>(path: &Path, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

//! Flat binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "SPKLCKPT"
//! version  u32       1
//! count    u32       number of entries
//! entry*   name_len u32 | name (UTF-8) | ndim u32 | dims u64 × ndim | values f64 × Π dims
//! ```
//!
//! Entries appear in parameter-store order.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPKLCKPT";
const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint archive (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Data("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint entries".into()));
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy archived values into `store`, matching by name. Every store
/// parameter must be present with the same shape.
pub fn restore(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} entries, model has {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Data(format!("checkpoint entry `{name}` unknown to model")))?;
        let slot = store.value_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::shape("checkpoint restore", slot.shape(), t.shape()));
        }
        *slot = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::ParamGroup;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add("encoder.w", ParamGroup::Encoder, Tensor::matrix(2, 2, vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        s.add("head.PER.start.b", ParamGroup::Head, Tensor::scalar(std::f64::consts::PI)).unwrap();
        let bytes = encode(&s);
        let entries = decode(&bytes).unwrap();
        assert_eq!(entries[0].0, "encoder.w");
        let mut fresh = ParamStore::new();
        fresh.add("encoder.w", ParamGroup::Encoder, Tensor::zeros(&[2, 2])).unwrap();
        fresh.add("head.PER.start.b", ParamGroup::Head, Tensor::scalar(0.0)).unwrap();
        restore(&mut fresh, &entries).unwrap();
        assert_eq!(encode(&fresh), bytes);
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Encoder, Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let b = encode(&s);
        assert_eq!(&b[..8], b"SPKLCKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(b[20], b'w');
        assert_eq!(b.len(), 16 + 4 + 1 + 4 + 16 + 8);
    }

    #[test]
    fn corrupt_archives_rejected() {
        assert!(decode(b"NOTACKPT").is_err());
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Encoder, Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = encode(&s);
        assert!(decode(&b[..b.len() - 3]).is_err());
    }
}

//! Binary tensor container.
//!
//! Layout: `b"CAMB"`, format version (u32 LE), then records until EOF. Each
//! record is name length (u32), name bytes (UTF-8), rank (u32), `rank` dims
//! (u32 each) and the values as little-endian `f32`.

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CAMB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
        let data = r
            .take(count, "values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode(params.iter()))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    Ok(decode(&fs::read(path)?)?.into_iter().collect())
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_checksum(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(super::params::hex(&Sha256::digest(fs::read(path)?)))
}

/// Single-tensor file (one unnamed record).
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode([("", tensor)]))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut records = decode(&fs::read(path)?)?;
    if records.len() != 1 {
        return Err(Error::Format(format!("expected one tensor, found {}", records.len())));
    }
    Ok(records.pop().unwrap().1)
}

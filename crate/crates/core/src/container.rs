//! The `RCN1` tensor container used for checkpoints and measurement matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RCN1"  u32 version
//! u32 metadata count, then per entry:  u16 key len, key, u16 value len, value
//! u32 tensor count, then per tensor:   u16 name len, name, u8 dtype (0 = f64, 1 = f32),
//!                                      u8 rank, rank × u32 extents, row-major payload
//! ```
//!
//! Metadata is written in key order so equal containers serialize to equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RCN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::corrupt(format!("missing metadata key {key}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::corrupt(format!("metadata {key}={raw} does not parse")))
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.metadata.len())?.to_le_bytes());
        for (k, v) in &self.metadata {
            put_str16(&mut out, k)?;
            put_str16(&mut out, v)?;
        }
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            put_str16(&mut out, name)?;
            out.push(dtype as u8);
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::invalid(format!("tensor {name} has too many dimensions")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d)?.to_le_bytes());
            }
            match dtype {
                Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::corrupt("bad magic, expected RCN1"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Unsupported(format!("container version {version}")));
        }
        let mut c = Container::new();
        for _ in 0..r.u32()? {
            let k = r.str16()?;
            let v = r.str16()?;
            c.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.str16()?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank == 0 {
                return Err(Error::corrupt(format!("tensor {name} has rank 0")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::corrupt(format!("tensor {name} extents overflow")))?;
            let data = match dtype {
                0 => r
                    .take(count.checked_mul(8).ok_or_else(|| Error::corrupt("size overflow"))?)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                1 => r
                    .take(count.checked_mul(4).ok_or_else(|| Error::corrupt("size overflow"))?)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                other => return Err(Error::corrupt(format!("unknown dtype code {other}"))),
            };
            if c.tensor(&name).is_some() {
                return Err(Error::corrupt(format!("duplicate tensor {name}")));
            }
            let t = Tensor::from_vec(&shape, data).map_err(|e| Error::corrupt(e.to_string()))?;
            c.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt("trailing bytes after last tensor"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_as(path, Dtype::F64)
    }

    pub fn save_as(&self, path: &Path, dtype: Dtype) -> Result<()> {
        fs::write(path, self.to_bytes(dtype)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{n} does not fit in u32")))
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::invalid("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn utf8(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::corrupt("invalid UTF-8"))
    }

    pub fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        self.utf8(len)
    }
}

//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MRMC"
//! version u32      currently 1
//! count   u32      number of parameter records
//! then `count` records, sorted by name:
//!   name_len u32
//!   name     UTF-8 bytes
//!   dtype    u8    0 = f32, 1 = f64
//!   rank     u8
//!   dims     rank x u64
//!   values   numel x 4 or 8 bytes, IEEE-754 little-endian
//! ```
//!
//! Trailing bytes after the last record are rejected. The same layout is
//! documented in docs/FORMATS.md.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRMC";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_NUMEL: u64 = 1 << 26;
const MAX_COUNT: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn to_bytes(params: &ParameterSet, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn save(params: &ParameterSet, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, to_bytes(params, dtype))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!(
                "truncated: needed {} bytes at offset {}",
                n, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {}",
            version
        )));
    }
    let count = r.u32()?;
    if count > MAX_COUNT {
        return Err(NnError::Checkpoint(format!(
            "parameter count {} exceeds limit",
            count
        )));
    }
    let mut params = ParameterSet::new(0);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(NnError::Checkpoint(format!(
                "invalid name length {}",
                name_len
            )));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(NnError::Checkpoint(format!(
                "duplicate parameter `{}`",
                name
            )));
        }
        let dtype = match r.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(NnError::Checkpoint(format!("unknown dtype tag {}", t))),
        };
        let rank = r.u8()? as usize;
        if rank > MAX_RANK {
            return Err(NnError::Checkpoint(format!("rank {} exceeds limit", rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64()?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| NnError::Checkpoint("dimension overflow".into()))?;
            if numel > MAX_NUMEL {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{}` too large ({} values)",
                    name, numel
                )));
            }
            shape.push(d as usize);
        }
        let byte_len = numel as usize * dtype.width();
        let raw = r.take(byte_len)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn load(path: &Path) -> Result<ParameterSet> {
    from_bytes(&std::fs::read(path)?)
}

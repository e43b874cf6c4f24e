//! Binary checkpoint format.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes "DCLP"
//! version u32
//! config  u32 byte length, then UTF-8 text
//! count   u32 number of array entries
//! entry   u32 name length, name bytes,
//!         u8 dtype tag (0 = f64, 1 = u64),
//!         u32 rank, rank * u32 dims,
//!         numel * 8 bytes of little-endian values
//! ```
//!
//! The config text carries the reproducible run settings plus the
//! vocabulary (one `vocab = token` line per id, in id order). Arrays
//! hold every model parameter by name, the optimizer moments under
//! `adam.m.*` / `adam.v.*`, and the scalars `adam.t`, `epoch`, and
//! `rng.state`. Round-trips are bitwise lossless.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DCLP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn numel(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            ArrayData::F64(v) => Some(v),
            ArrayData::U64(_) => None,
        }
    }

    pub fn as_u64(&self) -> Option<&[u64]> {
        match self {
            ArrayData::U64(v) => Some(v),
            ArrayData::F64(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn new(config_text: String) -> Self {
        Checkpoint {
            version: VERSION,
            config_text,
            arrays: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, name: &str, dims: Vec<usize>, values: Vec<f64>) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dims,
            data: ArrayData::F64(values),
        });
    }

    pub fn push_u64(&mut self, name: &str, dims: Vec<usize>, values: Vec<u64>) {
        self.arrays.push(ArrayEntry {
            name: name.to_string(),
            dims,
            data: ArrayData::U64(values),
        });
    }

    pub fn get(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing array \"{name}\"")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for entry in &self.arrays {
            let name = entry.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let tag: u8 = match entry.data {
                ArrayData::F64(_) => 0,
                ArrayData::U64(_) => 1,
            };
            out.push(tag);
            out.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
            for &d in &entry.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &entry.data {
                ArrayData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::CheckpointMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let cfg_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|e| Error::Data(format!("checkpoint config is not UTF-8: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Data(format!("checkpoint array name is not UTF-8: {e}")))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = r.take(numel * 8)?;
            let data = match tag {
                0 => ArrayData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => ArrayData::U64(
                    payload
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Data(format!(
                        "checkpoint array \"{name}\" has unknown dtype tag {other}"
                    )))
                }
            };
            arrays.push(ArrayEntry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config_text,
            arrays,
        })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Data(format!("checkpoint file not found: {}", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

//! `.ffms` binary container for checkpoints and round updates.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FFMS" | version u16 | flags u16 | entry count u32
//! per entry: name len u16 | name (UTF-8) | role u8 | rank u8 | dims u32 × rank
//!            | payload f32 × prod(dims)
//! CRC32 of every preceding byte, u32
//! ```
//!
//! The byte counts produced here are what the communication ledger records.

use std::fs;
use std::path::Path;

use thiserror::Error;


use crate::model::Role;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FFMS";
pub const VERSION: u16 = 1;
/// Magic, version, flags and entry count.
pub const HEADER_LEN: usize = 12;
pub const CRC_LEN: usize = 4;
/// Size of a container with no entries.
pub const EMPTY_LEN: usize = HEADER_LEN + CRC_LEN;

pub const FLAG_UPDATE: u16 = 0b01;
pub const FLAG_SUBSET: u16 = 0b10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown flag bits {0:#06x}")]
    UnknownFlags(u16),
    #[error("stream truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("entry name is {0} bytes, limit is 65535")]
    NameTooLong(usize),
    #[error("entry {0:?} has rank above 255")]
    RankTooLarge(String),
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("unknown role tag {0}")]
    InvalidRole(u8),
    #[error("invalid shape {dims:?} for entry {name:?}")]
    BadShape { name: String, dims: Vec<u32> },
    #[error("non-finite payload in entry {0:?}")]
    NonFinite(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub role: Role,
    pub tensor: Tensor<f32>,
}

/// Decoded container: flags plus named, role-tagged tensors in stored order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamContainer {
    pub flags: u16,
    pub entries: Vec<Entry>,
}

impl ParamContainer {
    pub fn new(flags: u16) -> Self {
        Self {
            flags,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, role: Role, tensor: Tensor<f32>) {
        self.entries.push(Entry {
            name: name.into(),
            role,
            tensor,
        });
    }

    pub fn is_update(&self) -> bool {
        self.flags & FLAG_UPDATE != 0
    }

    pub fn is_subset(&self) -> bool {
        self.flags & FLAG_SUBSET != 0
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }
}

fn entry_len(name_len: usize, rank: usize, numel: usize) -> usize {
    2 + name_len + 1 + 1 + 4 * rank + 4 * numel
}

/// Exact encoded size of `c`, without encoding it.
pub fn measure_bytes(c: &ParamContainer) -> usize {
    EMPTY_LEN
        + c.entries
            .iter()
            .map(|e| entry_len(e.name.len(), e.tensor.rank(), e.tensor.len()))
            .sum::<usize>()
}

pub fn serialize(c: &ParamContainer) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(measure_bytes(c));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.flags.to_le_bytes());
    out.extend_from_slice(&(c.entries.len() as u32).to_le_bytes());
    for e in &c.entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.len()))?;
        let rank =
            u8::try_from(e.tensor.rank()).map_err(|_| FormatError::RankTooLarge(e.name.clone()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.role.tag());
        out.push(rank);
        for &d in e.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| FormatError::BadShape {
                name: e.name.clone(),
                dims: vec![u32::MAX],
            })?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct RawEntry<'a> {
    name: &'a [u8],
    role: u8,
    dims: Vec<u32>,
    payload: &'a [u8],
}

/// Decodes a container. Structure is walked first (so a short stream is
/// reported as truncation), then the checksum, then entry contents.
pub fn deserialize(bytes: &[u8]) -> Result<ParamContainer, FormatError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let flags = cur.u16()?;
    let count = cur.u32()?;

    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = cur.take(name_len)?;
        let role = cur.u8()?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(4));
        let payload = match numel {
            Some(n) => cur.take(n)?,
            None => {
                return Err(FormatError::Truncated {
                    offset: cur.pos,
                    needed: usize::MAX,
                    available: bytes.len() - cur.pos,
                })
            }
        };
        raw.push(RawEntry {
            name,
            role,
            dims,
            payload,
        });
    }
    let body_end = cur.pos;
    let stored = cur.u32()?;
    if cur.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - cur.pos));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    if flags & !(FLAG_UPDATE | FLAG_SUBSET) != 0 {
        return Err(FormatError::UnknownFlags(flags));
    }

    let mut out = ParamContainer::new(flags);
    let mut seen = std::collections::HashSet::new();
    for r in raw {
        let name = std::str::from_utf8(r.name)
            .map_err(|_| FormatError::InvalidName)?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        let role = Role::from_tag(r.role).ok_or(FormatError::InvalidRole(r.role))?;
        if r.dims.contains(&0) {
            return Err(FormatError::BadShape { name, dims: r.dims });
        }
        let data: Vec<f32> = r
            .payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(shape, data).map_err(|_| FormatError::NonFinite(name.clone()))?;
        out.entries.push(Entry { name, role, tensor });
    }
    Ok(out)
}

/// Serializes `c` to a `.ffms` file.
pub fn write_file(path: &Path, c: &ParamContainer) -> crate::Result<()> {
    let bytes = serialize(c)?;
    fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn read_file(path: &Path) -> crate::Result<ParamContainer> {
    let bytes = fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(deserialize(&bytes)?)
}

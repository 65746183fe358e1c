//! Binary checkpoint format for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RAPT" (4 bytes)
//! u32 version = 1
//! u32 entry count
//! per entry:
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32, 1 = f64)
//!   u8 rank
//!   rank x u64 dims
//!   payload (dtype-sized little-endian floats, row-major)
//! ```
//!
//! Writing always uses f64 (the tensor element type), so a write/read
//! round-trip is bit-exact. f32 payloads are accepted on read and widened.
//! Optimizer state rides along as ordinary entries under reserved prefixes
//! (`adam.m.`, `adam.v.`) plus a scalar `step` entry; the trainer owns that
//! naming, this module just stores named tensors.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RAPT";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Named tensors, sorted by name (the map ensures a canonical file order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    /// Insert an entry; duplicate names are a caller bug worth surfacing.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("entry name of {} bytes", name.len())));
        }
        if self.entries.contains_key(&name) {
            return Err(CheckpointError::DuplicateEntry { name }.into());
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Fetch an entry that must exist (checkpoint/model mismatch otherwise).
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| CheckpointError::MissingEntry { name: name.to_owned() }.into())
    }

    /// Copy stored tensors into `targets` by name. Every target must be
    /// present with an identical shape; extra stored entries are ignored
    /// (they may be optimizer state the caller does not want).
    pub fn apply_to(&self, targets: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (name, target) in targets.iter_mut() {
            let stored = self.require(name)?;
            if stored.shape() != target.shape() {
                return Err(CheckpointError::EntryShapeMismatch {
                    name: name.clone(),
                    found: stored.shape().to_vec(),
                    expected: target.shape().to_vec(),
                }
                .into());
            }
            **target = stored.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(DTYPE_F64);
            buf.push(tensor.rank() as u8);
            for &dim in tensor.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &x in tensor.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Decode from an in-memory image; returns nothing on any defect (no
    /// partial state).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(CheckpointError::BadMagic { found }.into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(
                CheckpointError::UnsupportedVersion { found: version, supported: VERSION }.into()
            );
        }
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::NameNotUtf8)?
                .to_owned();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r
                    .take(numel.checked_mul(8).ok_or(CheckpointError::Truncated {
                        context: "payload size overflow",
                    })?, "f64 payload")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
                    .collect(),
                DTYPE_F32 => r
                    .take(numel.checked_mul(4).ok_or(CheckpointError::Truncated {
                        context: "payload size overflow",
                    })?, "f32 payload")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunked by 4")) as f64)
                    .collect(),
                tag => return Err(CheckpointError::UnknownDType { tag }.into()),
            };
            let tensor = Tensor::from_vec(shape, data)?;
            if entries.contains_key(&name) {
                return Err(CheckpointError::DuplicateEntry { name }.into());
            }
            entries.insert(name, tensor);
        }
        Ok(Checkpoint { entries })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { context })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

//! Named-tensor weight store and its `NTWS` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NTWS" | version: u16 | count: u32
//! repeated count times:
//!   name_len: u16 | name: UTF-8 bytes | rank: u8 | dims: u32 * rank | values: f64 * prod(dims)
//! ```
//!
//! Entry order is preserved, so decoding and re-encoding a file reproduces it
//! byte for byte.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTWS";
pub const VERSION: u16 = 1;

/// Ordered map of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry, keeping the original position on replace.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing entry `{name}`")))
    }

    /// Fetches `name` and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        ensure!(
            t.shape() == shape,
            Error::Load(format!(
                "entry `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            ))
        );
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::format("NTWS", "too many entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::format("NTWS", format!("name `{name}` too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::format("NTWS", format!("`{name}` rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::format("NTWS", format!("`{name}` dim too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(
            r.take(4)? == MAGIC,
            Error::format("NTWS", "bad magic bytes")
        );
        let version = r.u16()?;
        ensure!(
            version == VERSION,
            Error::format("NTWS", format!("unsupported version {version}"))
        );
        let count = r.u32()?;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format("NTWS", format!("entry name: {e}")))?
                .to_owned();
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("NTWS", format!("`{name}` size overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                Error::format("NTWS", format!("`{name}` size overflows"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::format("NTWS", format!("`{name}`: {e}")))?;
            ensure!(
                entries.insert(name.clone(), tensor).is_none(),
                Error::format("NTWS", format!("duplicate entry `{name}`"))
            );
        }
        ensure!(
            r.pos == bytes.len(),
            Error::format("NTWS", format!("{} trailing bytes", bytes.len() - r.pos))
        );
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("NTWS", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

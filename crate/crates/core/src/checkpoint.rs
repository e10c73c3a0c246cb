//! Versioned little-endian containers: checkpoints here, plus the reader and
//! writer helpers shared with the episode format.
//!
//! Checkpoint layout:
//!
//! ```text
//! magic    8 bytes  "VTACCKPT"
//! version  u32
//! digest   u32 length + utf-8 bytes (model config digest)
//! count    u32
//! count × { name: u32 length + utf-8, rank: u32, dims: rank × u64, values: f64... }
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("not a {kind} file: magic {found:?}")]
    BadMagic { kind: &'static str, found: Vec<u8> },
    #[error("{kind} version {found} is not supported (expected {supported})")]
    Version {
        kind: &'static str,
        found: u32,
        supported: u32,
    },
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("{what}: header says {header}, expected {expected}")]
    DimMismatch {
        what: String,
        header: u64,
        expected: u64,
    },
    #[error("config digest mismatch: file has {found}, config has {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("corrupt: {0}")]
    Corrupt(String),
}

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after them.
    pub fn open(
        data: &'a [u8],
        magic: &[u8; 8],
        kind: &'static str,
        version: u32,
    ) -> Result<Self, FormatError> {
        let mut r = Self { data, pos: 0 };
        let found = r.take(8)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                kind,
                found: found.to_vec(),
            });
        }
        let v = r.u32()?;
        if v != version {
            return Err(FormatError::Version {
                kind,
                found: v,
                supported: version,
            });
        }
        Ok(r)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn total(&self) -> usize {
        self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.data.len() as u64,
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| FormatError::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| FormatError::Corrupt("string is not utf-8".into()))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTACCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors tagged with the model config digest they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_digest: String,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.model_digest);
        w.u32(self.blobs.len() as u32);
        for (name, t) in &self.blobs {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::open(data, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let model_digest = r.str()?;
        let count = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FormatError::Corrupt(format!("{name}: shape overflows")))?;
            let values = r.f64s(n)?;
            let t = Tensor::new(shape, values)
                .map_err(|e| FormatError::Corrupt(format!("{name}: {e}")))?;
            blobs.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self {
            model_digest,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let data = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&data)?)
    }
}

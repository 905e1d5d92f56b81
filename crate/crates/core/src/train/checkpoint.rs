//! Named-tensor checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! b"MMVC"  u32 version
//! u64 config_len  config bytes (UTF-8 TOML)
//! u64 tensor_count
//! per tensor (sorted by name):
//!   u32 name_len  name bytes  u32 rank  u64 dims[rank]  u8 dtype  payload
//! u32 crc32 of every preceding byte
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One stored array.
#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
            Stored::U64 { shape, .. } => shape,
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Stored::F32(_) => 0,
            Stored::F64(_) => 1,
            Stored::U64 { .. } => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration that produced the tensors.
    pub config: String,
    pub tensors: BTreeMap<String, Stored>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(t.tag());
            match t {
                Stored::F32(x) => x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::F64(x) => x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 || &buf[..4] != MAGIC {
            return Err(Error::CorruptFile("not a checkpoint (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptFile("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let config_len = r.len_u64()?;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::CorruptFile("config is not UTF-8".into()))?;
        let count = r.len_u64()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptFile("tensor size overflows".into()))?;
            let tag = r.take(1)?[0];
            let t = match tag {
                0 => {
                    let data = r.words::<4>(n)?.map(f32::from_le_bytes).collect();
                    Stored::F32(Tensor::new(shape, data)?)
                }
                1 => {
                    let data = r.words::<8>(n)?.map(f64::from_le_bytes).collect();
                    Stored::F64(Tensor::new(shape, data)?)
                }
                2 => Stored::U64 {
                    data: r.words::<8>(n)?.map(u64::from_le_bytes).collect(),
                    shape,
                },
                other => return Err(Error::CorruptFile(format!("unknown dtype tag {other}"))),
            };
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::CorruptFile(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::CorruptFile(format!("{} unread bytes before checksum", body.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&Stored> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CorruptFile(format!("checkpoint lacks tensor `{name}`")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::CorruptFile(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::CorruptFile(format!("length {v} does not fit in memory")))
    }

    fn words<const W: usize>(&mut self, n: usize) -> Result<impl Iterator<Item = [u8; W]> + 'a> {
        let bytes = n
            .checked_mul(W)
            .ok_or_else(|| Error::CorruptFile("payload size overflows".into()))?;
        Ok(self.take(bytes)?.chunks_exact(W).map(|c| c.try_into().unwrap()))
    }
}

//! Corpus container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! b"MMVD"  u32 version  u64 sample_count
//! per sample:
//!   u32 label  u8 flags (1 = video, 2 = audio, 4 = text)
//!   u32 aligned[16]
//!   video: f32 fps  u32 T  u32 H  u32 W  u32 C  f32 frames[T*H*W*C]
//!   audio: f32 sample_rate  u64 len  f32 samples[len]
//!   text:  u32 k  u32 ids[k*16]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::MultimodalSample;
use crate::encoders::{AudioWave, TokenSeq, VideoClip, SEQ_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMVD";
pub const CORPUS_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_corpus(samples: &[MultimodalSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CORPUS_VERSION);
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        put_u32(&mut out, s.label as u32);
        let flags = s.has_video() as u8 | (s.has_audio() as u8) << 1 | (s.text.is_some() as u8) << 2;
        out.push(flags);
        s.aligned.ids().iter().for_each(|&id| put_u32(&mut out, id));
        if let Some(v) = &s.video {
            out.extend_from_slice(&v.fps.to_le_bytes());
            for &d in v.frames.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, v.frames.data());
        }
        if let Some(a) = &s.audio {
            out.extend_from_slice(&a.sample_rate.to_le_bytes());
            out.extend_from_slice(&(a.samples.len() as u64).to_le_bytes());
            put_f32s(&mut out, &a.samples);
        }
        if let Some(t) = &s.text {
            put_u32(&mut out, t.len() as u32);
            for seq in t {
                seq.ids().iter().for_each(|&id| put_u32(&mut out, id));
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptFile(format!("corpus truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptFile("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn seq(&mut self) -> Result<TokenSeq> {
        let ids = (0..SEQ_LEN).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq::new(&ids))
    }
}

pub fn decode_corpus(buf: &[u8]) -> Result<Vec<MultimodalSample>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::CorruptFile("bad corpus magic".into()));
    }
    let version = c.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let n = c.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let label = c.u32()? as usize;
        let flags = c.u8()?;
        let aligned = c.seq()?;
        let video = if flags & 1 != 0 {
            let fps = c.f32()?;
            let dims = (0..4).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = c.f32s(dims.iter().product())?;
            Some(VideoClip::new(Tensor::new(dims, data)?, fps)?)
        } else {
            None
        };
        let audio = if flags & 2 != 0 {
            let sample_rate = c.f32()?;
            let len = c.u64()? as usize;
            Some(AudioWave {
                samples: c.f32s(len)?,
                sample_rate,
            })
        } else {
            None
        };
        let text = if flags & 4 != 0 {
            let k = c.u32()? as usize;
            Some((0..k).map(|_| c.seq()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        out.push(MultimodalSample {
            video,
            audio,
            text,
            aligned,
            label,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[MultimodalSample]) -> Result<()> {
    let bytes = encode_corpus(samples)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<MultimodalSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_corpus(&bytes)
}

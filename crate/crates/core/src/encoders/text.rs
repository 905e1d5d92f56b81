//! Text backbone: frozen word table, shared linear map, max over positions.
//!
//! Word table file layout (little-endian): `b"MMWT"`, `u32` version,
//! `u32` vocab size, `u32` word dim, then `vocab * dim` `f32` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Forward, Mode, PoolKind};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const SEQ_LEN: usize = 16;
pub const PAD_ID: u32 = 0;
pub const TABLE: &str = "text.table";
const TABLE_MAGIC: &[u8; 4] = b"MMWT";
const TABLE_VERSION: u32 = 1;

/// Exactly [`SEQ_LEN`] token ids; shorter inputs are padded with [`PAD_ID`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: &[u32]) -> Self {
        let mut v: Vec<u32> = ids.iter().copied().take(SEQ_LEN).collect();
        v.resize(SEQ_LEN, PAD_ID);
        TokenSeq { ids: v }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab }),
            None => Ok(()),
        }
    }
}

pub fn init<F: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<()> {
    let table = match &cfg.word_table {
        Some(path) => {
            let t = load_word_table(path)?;
            if t.shape() != [cfg.vocab_size, cfg.word_dim] {
                return Err(Error::Config(format!(
                    "word table {path} is {:?}, config expects [{}, {}]",
                    t.shape(),
                    cfg.vocab_size,
                    cfg.word_dim
                )));
            }
            t.cast()
        }
        None => {
            let mut trng = ChaCha8Rng::seed_from_u64(cfg.word_table_seed);
            Tensor::randn([cfg.vocab_size, cfg.word_dim], 1.0, &mut trng)
        }
    };
    store.insert(TABLE, table);
    store.insert("text.pad", Tensor::randn([cfg.word_dim], 0.1, rng));
    nn::init_linear(store, "text.proj", cfg.word_dim, cfg.d_t, 1.0, rng);
    Ok(())
}

/// `f_t` for `M` sequences, returning `[M, d_t]`.
///
/// The table is read as a constant, so it never receives gradients; pad
/// positions use the learned `text.pad` vector instead.
pub fn forward<F: Scalar>(fwd: &mut Forward<'_, '_, F>, cfg: &EncoderConfig, seqs: &[&TokenSeq]) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::shape("text encoder", "no sequences"));
    }
    let table = fwd.store.get(TABLE)?;
    let (vocab, wd) = (table.shape()[0], table.shape()[1]);
    let rows = seqs.len() * SEQ_LEN;
    let mut words = vec![F::zero(); rows * wd];
    let mut pad_mask = vec![F::zero(); rows * wd];
    for (r, id) in seqs.iter().flat_map(|s| s.ids().iter()).enumerate() {
        let id = *id;
        if id as usize >= vocab {
            return Err(Error::OutOfVocabulary { id, vocab });
        }
        if id == PAD_ID {
            pad_mask[r * wd..(r + 1) * wd].fill(F::one());
        } else {
            words[r * wd..(r + 1) * wd].copy_from_slice(table.row(id as usize));
        }
    }
    let words = fwd.tape.constant(Tensor::new([rows, wd], words)?);
    let mask = fwd.tape.constant(Tensor::new([rows, wd], pad_mask)?);
    let pad = fwd.param("text.pad")?;
    let pads = fwd.tape.mul(mask, pad)?;
    let emb = fwd.tape.add(words, pads)?;
    let mapped = fwd.linear("text.proj", emb)?;
    let mapped = fwd.tape.reshape(mapped, &[seqs.len(), SEQ_LEN, cfg.d_t])?;
    nn::pool_var(fwd.tape, mapped, PoolKind::MaxOverAxis(1))
}

/// Eval-mode `f_t` for one sequence.
pub fn encode_text<F: Scalar>(tokens: &TokenSeq, cfg: &EncoderConfig, store: &ParamStore<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::inference();
    let mut fwd = Forward::new(&mut tape, store, Mode::Eval);
    let y = forward(&mut fwd, cfg, &[tokens])?;
    tape.value(y).index_outer(0)
}

pub fn write_word_table<W: Write>(mut w: W, table: &Tensor<f32>) -> Result<()> {
    if table.rank() != 2 {
        return Err(Error::shape("word table", format!("expected rank 2, got {:?}", table.shape())));
    }
    w.write_all(TABLE_MAGIC)?;
    w.write_all(&TABLE_VERSION.to_le_bytes())?;
    w.write_all(&(table.shape()[0] as u32).to_le_bytes())?;
    w.write_all(&(table.shape()[1] as u32).to_le_bytes())?;
    w.write_all(&f32::to_le_bytes_vec(table.data()))?;
    Ok(())
}

pub fn read_word_table<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::CorruptFile("word table header truncated".into()))?;
    if &head[..4] != TABLE_MAGIC {
        return Err(Error::CorruptFile("bad word table magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != TABLE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: TABLE_VERSION,
        });
    }
    let (vocab, dim) = (word(8) as usize, word(12) as usize);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != vocab * dim * 4 {
        return Err(Error::CorruptFile(format!(
            "word table payload is {} bytes, expected {}",
            bytes.len(),
            vocab * dim * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new([vocab, dim], data)
}

pub fn load_word_table(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_word_table(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_word_table(path: impl AsRef<Path>, table: &Tensor<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_word_table(&mut f, table)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_seq_pads_and_truncates() {
        assert_eq!(TokenSeq::new(&[3, 4]).ids()[2..], [0; 14]);
        assert_eq!(TokenSeq::new(&[1; 20]).ids().len(), SEQ_LEN);
    }

    #[test]
    fn word_table_round_trip_and_corruption() {
        let t = Tensor::new([3, 2], vec![1.0f32, -2.0, 0.5, 4.0, 0.0, 7.25]).unwrap();
        let mut buf = Vec::new();
        write_word_table(&mut buf, &t).unwrap();
        assert_eq!(read_word_table(&buf[..]).unwrap(), t);
        assert!(matches!(read_word_table(&buf[..buf.len() - 1]), Err(Error::CorruptFile(_))));
        let mut v = buf.clone();
        v[4] = 9;
        assert!(matches!(read_word_table(&v[..]), Err(Error::VersionMismatch { .. })));
    }
}

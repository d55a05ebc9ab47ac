//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"COCG"
//! version u32 (currently 1)
//! count   u32            number of parameter records
//! flags   u32            bit 0: optimizer section present
//! rng     32-byte seed, u64 stream, u128 word position
//! count x record         (name_len u32, name utf-8, rank u32,
//!                         extents u32 x rank, f32 payload)
//! [optimizer section]    kind u8 (0 adam / 1 rmsprop), step u64,
//!                        buf_count u32, buf_count x record
//! ```
//!
//! The decoder treats input as untrusted: every length is bounds-checked
//! against the remaining bytes before any allocation.

use crate::error::Error;
use crate::tensor::{Elem, ParamBank};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"COCG";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;
const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;

/// Serializable RNG position (ChaCha8 seed + stream + word offset).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One named tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    RmsProp,
}

/// Optimizer moments stored alongside parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub kind: OptimKind,
    pub step: u64,
    pub buffers: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<TensorRecord>,
    pub rng: RngState,
    pub optim: Option<OptimSection>,
}

impl Checkpoint {
    pub fn from_bank<E: Elem>(bank: &ParamBank<E>, rng: &RngState, optim: Option<OptimSection>) -> Self {
        let params = bank
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|v| v.to_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { version: VERSION, params, rng: rng.clone(), optim }
    }

    /// Copy parameters into a bank built from the same model config.
    /// Every bank entry must be present with the exact shape; the first
    /// mismatch is reported by name.
    pub fn apply_to_bank<E: Elem>(&self, bank: &mut ParamBank<E>) -> Result<(), Error> {
        for id in bank.ids().collect::<Vec<_>>() {
            let name = bank.name(id).to_string();
            let rec = self
                .params
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Load(format!("checkpoint is missing parameter {name:?}")))?;
            let t = bank.get_mut(id);
            if rec.shape != t.shape {
                return Err(Error::Load(format!(
                    "shape mismatch for {name:?}: checkpoint {:?}, model {:?}",
                    rec.shape, t.shape
                )));
            }
            t.data = rec.data.iter().map(|&v| E::from_f64(v as f64)).collect();
        }
        Ok(())
    }
}

fn put_record(out: &mut Vec<u8>, rec: &TensorRecord) {
    out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.name.as_bytes());
    out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
    for &d in &rec.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &rec.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&c.version.to_le_bytes());
    out.extend_from_slice(&(c.params.len() as u32).to_le_bytes());
    let flags = if c.optim.is_some() { FLAG_OPTIMIZER } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&c.rng.seed);
    out.extend_from_slice(&c.rng.stream.to_le_bytes());
    out.extend_from_slice(&c.rng.word_pos.to_le_bytes());
    for rec in &c.params {
        put_record(&mut out, rec);
    }
    if let Some(opt) = &c.optim {
        out.push(match opt.kind {
            OptimKind::Adam => 0,
            OptimKind::RmsProp => 1,
        });
        out.extend_from_slice(&opt.step.to_le_bytes());
        out.extend_from_slice(&(opt.buffers.len() as u32).to_le_bytes());
        for rec in &opt.buffers {
            put_record(&mut out, rec);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Load(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128, Error> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<TensorRecord, Error> {
        let name_len = self.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(Error::Load(format!("parameter name length {name_len} exceeds {MAX_NAME_LEN}")));
        }
        let name = std::str::from_utf8(self.take(name_len, "parameter name")?)
            .map_err(|_| Error::Load(format!("parameter name at offset {} is not utf-8", self.pos)))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Load(format!("rank {rank} of {name:?} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = self.u32("extent")? as u64;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Load(format!("extent overflow in {name:?}")))?;
            shape.push(d as usize);
        }
        let bytes = numel
            .checked_mul(4)
            .filter(|&b| b <= (self.buf.len() - self.pos) as u64)
            .ok_or_else(|| {
                Error::Load(format!(
                    "truncated checkpoint: payload of {name:?} needs {numel} floats at offset {}",
                    self.pos
                ))
            })?;
        let raw = self.take(bytes as usize, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(TensorRecord { name, shape, data })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, Error> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Load(format!("bad magic {magic:02x?}, expected \"COCG\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("param count")? as usize;
    let flags = r.u32("flags")?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32, "rng seed")?);
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng word position")?;
    let mut params = Vec::new();
    for _ in 0..count {
        params.push(r.record()?);
    }
    let optim = if flags & FLAG_OPTIMIZER != 0 {
        let kind = match r.take(1, "optimizer kind")?[0] {
            0 => OptimKind::Adam,
            1 => OptimKind::RmsProp,
            k => return Err(Error::Load(format!("unknown optimizer kind {k}"))),
        };
        let step = r.u64("optimizer step")?;
        let n = r.u32("optimizer buffer count")? as usize;
        let mut buffers = Vec::new();
        for _ in 0..n {
            buffers.push(r.record()?);
        }
        Some(OptimSection { kind, step, buffers })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Load(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { version, params, rng: RngState { seed, stream, word_pos }, optim })
}

pub fn save(path: &Path, c: &Checkpoint) -> Result<(), Error> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(c))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, Error> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut bank = ParamBank::<f32>::new();
        bank.add("a.w", Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]));
        bank.add("a.b", Tensor::new(vec![0.5, -0.5], &[2]));
        let rng = RngState { seed: [7u8; 32], stream: 3, word_pos: 99 };
        Checkpoint::from_bank(&bank, &rng, None)
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let back = decode(&encode(&c)).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&sample());
        bytes[1] ^= 0xff;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(&sample());
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let c = sample();
        let mut bank = ParamBank::<f32>::new();
        bank.add("a.w", Tensor::zeros(&[3, 2]));
        let err = c.apply_to_bank(&mut bank).unwrap_err();
        assert!(err.to_string().contains("a.w"), "{err}");
    }

    #[test]
    fn missing_parameter_names_it() {
        let c = sample();
        let mut bank = ParamBank::<f32>::new();
        bank.add("other.w", Tensor::zeros(&[2, 3]));
        let err = c.apply_to_bank(&mut bank).unwrap_err();
        assert!(err.to_string().contains("other.w"), "{err}");
    }

    #[test]
    fn optimizer_section_roundtrips() {
        let mut c = sample();
        c.optim = Some(OptimSection {
            kind: OptimKind::RmsProp,
            step: 42,
            buffers: vec![TensorRecord { name: "ms.a.w".into(), shape: vec![6], data: vec![0.1; 6] }],
        });
        let back = decode(&encode(&c)).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn rng_state_roundtrips_through_chacha() {
        use rand::RngCore;
        let mut rng = ChaCha8Rng::from_seed([9u8; 32]);
        rng.set_stream(5);
        let _ = rng.next_u64();
        let st = RngState::capture(&rng);
        let mut restored = st.restore();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }
}

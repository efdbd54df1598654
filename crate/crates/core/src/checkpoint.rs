//! `VSCK` checkpoint container.
//!
//! Layout (little-endian): magic, `u32` version, `u8` kind, length-prefixed
//! JSON config, `u64` step, RNG states, named `f64` tensors, optimizer
//! moments, trailing scalars, then a CRC-32 of everything before it.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::binio::{Reader, WriteLe};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dvae = 0,
    Reinforce = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config_json: String,
    pub step: u64,
    pub rngs: Vec<RngState>,
    pub names: Vec<String>,
    pub params: Vec<Array2<f64>>,
    pub opt_steps: u64,
    pub first_moments: Vec<Array2<f64>>,
    pub second_moments: Vec<Array2<f64>>,
    /// Model-specific scalar state (e.g. running baselines).
    pub extra: Vec<f64>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Array2<f64>) {
    out.put_u32(t.nrows() as u32);
    out.put_u32(t.ncols() as u32);
    for &v in t.iter() {
        out.put_f64(v);
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Array2<f64>> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows.checked_mul(cols).filter(|&n| n.saturating_mul(8) <= r.remaining()).ok_or_else(|| {
        Error::CorruptCheckpoint(format!("tensor {rows}x{cols} exceeds file size"))
    })?;
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
}

fn read_tensors(r: &mut Reader<'_>, n: usize) -> Result<Vec<Array2<f64>>> {
    (0..n).map(|_| read_tensor(r)).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.put_u32(CHECKPOINT_VERSION);
        out.put_u8(self.kind as u8);
        out.put_u64(self.config_json.len() as u64);
        out.extend_from_slice(self.config_json.as_bytes());
        out.put_u64(self.step);
        out.put_u32(self.rngs.len() as u32);
        for s in &self.rngs {
            out.extend_from_slice(&s.seed);
            out.put_u64(s.stream);
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        out.put_u32(self.params.len() as u32);
        for (name, p) in self.names.iter().zip(&self.params) {
            out.put_u32(name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, p);
        }
        out.put_u64(self.opt_steps);
        out.put_u32(self.first_moments.len() as u32);
        for m in self.first_moments.iter().chain(&self.second_moments) {
            put_tensor(&mut out, m);
        }
        out.put_u32(self.extra.len() as u32);
        for &v in &self.extra {
            out.put_f64(v);
        }
        let crc = crc32fast::hash(&out);
        out.put_u32(crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = Reader::new(bytes, "checkpoint");
        head.magic(CHECKPOINT_MAGIC)?;
        let version = head.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 12 {
            return Err(Error::CorruptCheckpoint("missing checksum".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }
        Self::parse_body(body).map_err(|e| match e {
            Error::CorruptCheckpoint(_) => e,
            other => Error::CorruptCheckpoint(other.to_string()),
        })
    }

    fn parse_body(body: &[u8]) -> Result<Self> {
        let mut r = Reader::new(body, "checkpoint");
        r.bytes(8)?;
        let kind = match r.u8()? {
            0 => ModelKind::Dvae,
            1 => ModelKind::Reinforce,
            k => return Err(Error::CorruptCheckpoint(format!("unknown model kind {k}"))),
        };
        let len = r.u64()? as usize;
        let config_json = String::from_utf8(r.bytes(len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("config is not UTF-8".into()))?;
        let step = r.u64()?;
        let n_rng = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rng.min(16));
        for _ in 0..n_rng {
            let seed: [u8; 32] = r.bytes(32)?.try_into().unwrap();
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.bytes(16)?.try_into().unwrap());
            rngs.push(RngState { seed, stream, word_pos });
        }
        let n_params = r.u32()? as usize;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for _ in 0..n_params {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            names.push(name);
            params.push(read_tensor(&mut r)?);
        }
        let opt_steps = r.u64()?;
        let n_moments = r.u32()? as usize;
        let first_moments = read_tensors(&mut r, n_moments)?;
        let second_moments = read_tensors(&mut r, n_moments)?;
        let n_extra = r.u32()? as usize;
        let extra = (0..n_extra).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { kind, config_json, step, rngs, names, params, opt_steps, first_moments, second_moments, extra })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

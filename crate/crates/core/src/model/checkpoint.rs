//! Binary checkpoints holding both generators.
//!
//! Layout (little endian):
//!
//! ```text
//! 0   magic     b"MDCK"
//! 4   version   u16 = 1
//! 6   kind      u16 = 1 (dual generator pair)
//! 8   tensors   u32
//! 12  meta_len  u32
//! 16  reserved  u64 = 0
//! 24  meta      JSON, meta_len bytes
//!     tensors   repeated: name_len u16, name, rows u32, cols u32, rows*cols f64
//! ```
//!
//! Tensor names carry a `md.` or `dm.` prefix for the owning generator.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Direction, Generator, ModelConfig, ModelError};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u16 = 1;
const KIND_PAIR: u16 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("unsupported checkpoint kind {0}")]
    Kind(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "bad-magic",
            CheckpointError::Version(_) => "bad-version",
            CheckpointError::Kind(_) => "bad-kind",
            CheckpointError::Truncated => "truncated",
            CheckpointError::Trailing(_) => "trailing-bytes",
            CheckpointError::Io(_) => "io",
            _ => "invalid-contents",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub music_to_dance: ModelConfig,
    pub dance_to_music: ModelConfig,
    /// Free-form run configuration stored alongside the weights.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub music_to_dance: Generator,
    pub dance_to_music: Generator,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64, md: Generator, dm: Generator, run: serde_json::Value) -> Self {
        let meta = CheckpointMeta { step, seed, music_to_dance: md.cfg.clone(), dance_to_music: dm.cfg.clone(), run };
        Checkpoint { meta, music_to_dance: md, dance_to_music: dm }
    }

    pub fn generator(&self, dir: Direction) -> &Generator {
        match dir {
            Direction::MusicToDance => &self.music_to_dance,
            Direction::DanceToMusic => &self.dance_to_music,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = serde_json::to_vec(&self.meta)?;
        let gens = [("md.", &self.music_to_dance), ("dm.", &self.dance_to_music)];
        let count: usize = gens.iter().map(|(_, g)| g.params.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&KIND_PAIR.to_le_bytes());
        out.extend_from_slice(&(count as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.extend_from_slice(&meta);
        for (prefix, g) in gens {
            for (name, t) in g.params.iter() {
                let full = format!("{prefix}{name}");
                let len = u16::try_from(full.len()).map_err(|_| CheckpointError::Invalid(format!("name too long: {full}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
                out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = r.u16()?;
        if kind != KIND_PAIR {
            return Err(CheckpointError::Kind(kind));
        }
        let count = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        r.take(8)?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut md = ParamSet::new();
        let mut dm = ParamSet::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| CheckpointError::Invalid(e.to_string()))?.to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows.checked_mul(cols).filter(|l| l.checked_mul(8).is_some()).ok_or(CheckpointError::Truncated)?;
            let data: Vec<f64> = r.take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Invalid(format!("tensor `{name}` holds non-finite values")));
            }
            let t = Tensor::matrix(rows, cols, data).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
            if let Some(rest) = name.strip_prefix("md.") {
                md.push(rest, t);
            } else if let Some(rest) = name.strip_prefix("dm.") {
                dm.push(rest, t);
            } else {
                return Err(CheckpointError::Invalid(format!("tensor `{name}` has no generator prefix")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        if md.len() + dm.len() != count {
            return Err(CheckpointError::Invalid("tensor count mismatch".into()));
        }
        let music_to_dance = Generator::from_params(Direction::MusicToDance, meta.music_to_dance.clone(), md)?;
        let dance_to_music = Generator::from_params(Direction::DanceToMusic, meta.dance_to_music.clone(), dm)?;
        if music_to_dance.params.len() + dance_to_music.params.len() != count {
            return Err(CheckpointError::Invalid("unexpected extra tensors".into()));
        }
        Ok(Checkpoint { meta, music_to_dance, dance_to_music })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, ck.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&std::fs::read(path)?)
}

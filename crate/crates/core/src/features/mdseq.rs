//! The `.mdseq` binary format.
//!
//! A 24-byte little-endian header followed by the frames as row-major f64:
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `MDSQ`                                 |
//! | 4      | 2    | version (u16, currently 1)                   |
//! | 6      | 2    | modality (u16: 1 music, 2 dance, 3 matrix)   |
//! | 8      | 4    | frame count T (u32)                          |
//! | 12     | 4    | channel count (u32)                          |
//! | 16     | 8    | fps (f64; 0 for plain matrices)              |
//! | 24     | 8·T·C| payload                                      |

use std::path::Path;

use thiserror::Error;

use super::{DanceSequence, MusicSequence, SequenceError, DANCE_CHANNELS, MUSIC_CHANNELS, SYMBOLIC_CHANNELS};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MDSQ";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Music = 1,
    Dance = 2,
    Matrix = 3,
}

impl Modality {
    fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(Modality::Music),
            2 => Some(Modality::Dance),
            3 => Some(Modality::Matrix),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic number {0:?}, expected \"MDSQ\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unknown modality code {0}")]
    UnknownModality(u16),
    #[error("file holds {got:?} data, expected {expected:?}")]
    Modality { expected: Modality, got: Modality },
    #[error("channel count {got} does not match {expected}")]
    Channels { expected: String, got: usize },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("invalid contents: {0}")]
    Invalid(#[from] SequenceError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// Stable identifier for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "bad-magic",
            FormatError::Version(_) => "bad-version",
            FormatError::UnknownModality(_) | FormatError::Modality { .. } => "modality-mismatch",
            FormatError::Channels { .. } => "channel-mismatch",
            FormatError::Truncated { .. } => "truncated",
            FormatError::Trailing(_) => "trailing-bytes",
            FormatError::Invalid(_) => "invalid-contents",
            FormatError::Io(_) => "io",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub version: u16,
    pub modality: Modality,
    pub frames: u32,
    pub channels: u32,
    pub fps: f64,
}

pub fn encode(modality: Modality, data: &Tensor, fps: f64) -> Vec<u8> {
    let (t, c) = (data.rows(), data.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(modality as u16).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&fps.to_le_bytes());
    for v in data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Tensor), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { needed: HEADER_LEN, have: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let mcode = u16::from_le_bytes([bytes[6], bytes[7]]);
    let modality = Modality::from_u16(mcode).ok_or(FormatError::UnknownModality(mcode))?;
    let frames = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let channels = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let fps = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let n = frames as usize * channels as usize;
    let needed = HEADER_LEN + 8 * n;
    if bytes.len() < needed {
        return Err(FormatError::Truncated { needed, have: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(FormatError::Trailing(bytes.len() - needed));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let t = Tensor::matrix(frames as usize, channels as usize, data).expect("length checked");
    Ok((Header { version, modality, frames, channels, fps }, t))
}

pub fn read(path: impl AsRef<Path>) -> Result<(Header, Tensor), FormatError> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, modality: Modality, data: &Tensor, fps: f64) -> Result<(), FormatError> {
    std::fs::write(path, encode(modality, data, fps))?;
    Ok(())
}

fn expect_modality(h: &Header, m: Modality) -> Result<(), FormatError> {
    if h.modality != m {
        return Err(FormatError::Modality { expected: m, got: h.modality });
    }
    Ok(())
}

pub fn decode_music(bytes: &[u8]) -> Result<MusicSequence, FormatError> {
    let (h, t) = decode(bytes)?;
    expect_modality(&h, Modality::Music)?;
    let c = h.channels as usize;
    if c != MUSIC_CHANNELS && c != SYMBOLIC_CHANNELS {
        return Err(FormatError::Channels { expected: "53 or 13".into(), got: c });
    }
    Ok(MusicSequence::new(t, h.fps)?)
}

pub fn decode_dance(bytes: &[u8]) -> Result<DanceSequence, FormatError> {
    let (h, t) = decode(bytes)?;
    expect_modality(&h, Modality::Dance)?;
    if h.channels as usize != DANCE_CHANNELS {
        return Err(FormatError::Channels { expected: DANCE_CHANNELS.to_string(), got: h.channels as usize });
    }
    Ok(DanceSequence::new(t, h.fps)?)
}

pub fn load_music(path: impl AsRef<Path>) -> Result<MusicSequence, FormatError> {
    decode_music(&std::fs::read(path)?)
}

pub fn load_dance(path: impl AsRef<Path>) -> Result<DanceSequence, FormatError> {
    decode_dance(&std::fs::read(path)?)
}

/// Load any matrix payload regardless of modality (embedding batches).
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    Ok(read(path)?.1)
}

pub fn save_music(seq: &MusicSequence, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write(path, Modality::Music, seq.frames(), seq.fps)
}

pub fn save_dance(seq: &DanceSequence, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write(path, Modality::Dance, seq.frames(), seq.fps)
}

pub fn save_matrix(m: &Tensor, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write(path, Modality::Matrix, m, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 13, vec![0.0; 26]).unwrap();
        let b = encode(Modality::Music, &t, 25.0);
        assert_eq!(b.len(), 24 + 8 * 26);
        assert_eq!(&b[..4], b"MDSQ");
        assert_eq!(&b[4..8], &[1, 0, 1, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 13, 0, 0, 0]);
        assert_eq!(&b[16..24], &25.0f64.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::matrix(1, 13, vec![0.0; 13]).unwrap();
        let good = encode(Modality::Music, &t, 25.0);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err().code(), "bad-magic");
        assert_eq!(decode(&good[..good.len() - 3]).unwrap_err().code(), "truncated");
        assert_eq!(decode(&good[..10]).unwrap_err().code(), "truncated");
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long).unwrap_err().code(), "trailing-bytes");
        assert_eq!(decode_dance(&good).unwrap_err().code(), "modality-mismatch");
        let narrow = encode(Modality::Dance, &Tensor::matrix(1, 5, vec![0.0; 5]).unwrap(), 25.0);
        assert_eq!(decode_dance(&narrow).unwrap_err().code(), "channel-mismatch");
        let as_dance = encode(Modality::Dance, &t, 25.0);
        assert_eq!(decode_music(&as_dance).unwrap_err().code(), "modality-mismatch");
    }
}

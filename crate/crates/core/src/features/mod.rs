//! Music and dance sequences, their file format, dataset manifests and
//! synthetic paired data.
//!
//! Music frames have 53 channels: MFCC `[0, 20)`, MFCC deltas `[20, 40)`,
//! chroma `[40, 52)` and a binary beat flag at 52. Generated music uses the
//! 13-channel symbolic layout, chroma `[0, 12)` and beat at 12.
//!
//! Dance frames have 147 channels: root translation in meters `[0, 3)`
//! followed by 24 joints of 6D rotations.

mod manifest;
pub mod mdseq;
mod synth;

pub use manifest::{load_manifest, write_manifest, ManifestEntry, ManifestError, Pair, PairedDataset, Split};
pub use mdseq::{FormatError, Header, Modality};
pub use synth::{synth_dataset, synth_pair, Genre, SynthOptions};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotations::{from_sixd, to_sixd, Mat3, Rotation6D, RotationError, Vec3};
use crate::skeleton::NUM_JOINTS;
use crate::tensor::Tensor;

pub const MUSIC_CHANNELS: usize = 53;
pub const SYMBOLIC_CHANNELS: usize = 13;
pub const DANCE_CHANNELS: usize = 3 + 6 * NUM_JOINTS;
pub const MFCC: std::ops::Range<usize> = 0..20;
pub const MFCC_DELTA: std::ops::Range<usize> = 20..40;
pub const CHROMA: std::ops::Range<usize> = 40..52;
pub const BEAT: usize = 52;
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("sequence needs at least one frame")]
    Empty,
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: String, got: usize },
    #[error("frame {frame}: beat flag {value} is not 0 or 1")]
    Beat { frame: usize, value: f64 },
    #[error("frame {frame}: chroma bin {bin} = {value} outside [0, 1]")]
    Chroma { frame: usize, bin: usize, value: f64 },
    #[error("frame {frame}, joint {joint}: {source}")]
    Rotation { frame: usize, joint: usize, source: RotationError },
    #[error("frame {frame}: non-finite value")]
    NonFinite { frame: usize },
    #[error("fps must be positive and finite, got {0}")]
    Fps(f64),
    #[error("sequences differ: {0}")]
    Mismatch(String),
}

/// Music features, `T×53` or `T×13`.
#[derive(Clone, Debug, PartialEq)]
pub struct MusicSequence {
    frames: Tensor,
    pub fps: f64,
    /// Key of the piece when known.
    pub key: Option<ChordSeed>,
}

impl MusicSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self, SequenceError> {
        let s = MusicSequence { frames, fps, key: None };
        s.validate()?;
        Ok(s)
    }

    pub fn with_key(mut self, key: ChordSeed) -> Self {
        self.key = Some(key);
        self
    }

    /// Build from raw generator output: chroma is clipped to `[0, 1]` and the
    /// beat flag thresholded at 0.5. Accepts either layout.
    pub fn from_generated(raw: &Tensor, fps: f64) -> Result<Self, SequenceError> {
        let mut frames = raw.clone();
        let (t, c) = (frames.rows(), frames.cols());
        let (chroma, beat) = layout(c)?;
        for r in 0..t {
            let row = frames.row_mut(r);
            for v in &mut row[chroma.clone()] {
                *v = v.clamp(0.0, 1.0);
            }
            row[beat] = if row[beat] >= 0.5 { 1.0 } else { 0.0 };
        }
        Self::new(frames, fps)
    }

    fn validate(&self) -> Result<(), SequenceError> {
        check_fps(self.fps)?;
        let (t, c) = self.frames.dims2("music").map_err(|_| SequenceError::Empty)?;
        if t == 0 {
            return Err(SequenceError::Empty);
        }
        let (chroma, beat) = layout(c)?;
        for f in 0..t {
            let row = self.frames.row(f);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SequenceError::NonFinite { frame: f });
            }
            if row[beat] != 0.0 && row[beat] != 1.0 {
                return Err(SequenceError::Beat { frame: f, value: row[beat] });
            }
            for (bin, &v) in row[chroma.clone()].iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(SequenceError::Chroma { frame: f, bin, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    pub fn is_symbolic(&self) -> bool {
        self.channels() == SYMBOLIC_CHANNELS
    }

    pub fn chroma(&self, t: usize) -> &[f64] {
        let (chroma, _) = layout(self.channels()).expect("validated");
        &self.frames.row(t)[chroma]
    }

    pub fn beat(&self, t: usize) -> f64 {
        let (_, beat) = layout(self.channels()).expect("validated");
        self.frames.get(t, beat)
    }

    pub fn beat_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.beat(t) == 1.0).collect()
    }

    /// Chroma and beat as a `T×13` matrix.
    pub fn symbolic(&self) -> Tensor {
        if self.is_symbolic() {
            return self.frames.clone();
        }
        let t = self.len();
        let mut out = Vec::with_capacity(t * SYMBOLIC_CHANNELS);
        for r in 0..t {
            out.extend_from_slice(self.chroma(r));
            out.push(self.beat(r));
        }
        Tensor::matrix(t, SYMBOLIC_CHANNELS, out).expect("sizes agree")
    }

    /// Full 53-channel frames; symbolic input gets zero MFCC channels.
    pub fn full(&self) -> Tensor {
        if !self.is_symbolic() {
            return self.frames.clone();
        }
        lift_symbolic(&self.frames)
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self, SequenceError> {
        let frames = self.frames.slice(0, start, end).map_err(|e| SequenceError::Mismatch(e.to_string()))?;
        let mut s = Self::new(frames, self.fps)?;
        s.key = self.key;
        Ok(s)
    }
}

/// Widen `T×13` symbolic frames to the 53-channel layout with zero MFCC.
pub fn lift_symbolic(sym: &Tensor) -> Tensor {
    let t = sym.rows();
    let mut out = vec![0.0; t * MUSIC_CHANNELS];
    for r in 0..t {
        let row = sym.row(r);
        out[r * MUSIC_CHANNELS + CHROMA.start..r * MUSIC_CHANNELS + CHROMA.end].copy_from_slice(&row[..12]);
        out[r * MUSIC_CHANNELS + BEAT] = row[12];
    }
    Tensor::matrix(t, MUSIC_CHANNELS, out).expect("sizes agree")
}

fn layout(channels: usize) -> Result<(std::ops::Range<usize>, usize), SequenceError> {
    match channels {
        MUSIC_CHANNELS => Ok((CHROMA, BEAT)),
        SYMBOLIC_CHANNELS => Ok((0..12, 12)),
        got => Err(SequenceError::Channels { expected: "53 or 13".into(), got }),
    }
}

fn check_fps(fps: f64) -> Result<(), SequenceError> {
    if fps > 0.0 && fps.is_finite() {
        Ok(())
    } else {
        Err(SequenceError::Fps(fps))
    }
}

/// Dance poses, `T×147`.
#[derive(Clone, Debug, PartialEq)]
pub struct DanceSequence {
    frames: Tensor,
    pub fps: f64,
}

impl DanceSequence {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self, SequenceError> {
        check_fps(fps)?;
        let (t, c) = frames.dims2("dance").map_err(|_| SequenceError::Empty)?;
        if t == 0 {
            return Err(SequenceError::Empty);
        }
        if c != DANCE_CHANNELS {
            return Err(SequenceError::Channels { expected: DANCE_CHANNELS.to_string(), got: c });
        }
        for f in 0..t {
            let row = frames.row(f);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SequenceError::NonFinite { frame: f });
            }
            for j in 0..NUM_JOINTS {
                from_sixd(&Rotation6D::from_slice(&row[3 + 6 * j..]))
                    .map_err(|source| SequenceError::Rotation { frame: f, joint: j, source })?;
            }
        }
        Ok(DanceSequence { frames, fps })
    }

    /// Assemble from per-frame translations and local joint rotations.
    pub fn from_parts(translations: &[Vec3], rotations: &[Vec<Mat3>], fps: f64) -> Result<Self, SequenceError> {
        if translations.len() != rotations.len() {
            return Err(SequenceError::Mismatch("translation and rotation counts".into()));
        }
        let mut data = Vec::with_capacity(translations.len() * DANCE_CHANNELS);
        for (tr, rots) in translations.iter().zip(rotations) {
            if rots.len() != NUM_JOINTS {
                return Err(SequenceError::Channels { expected: "24 rotations".into(), got: rots.len() });
            }
            data.extend_from_slice(tr.as_slice());
            for r in rots {
                data.extend_from_slice(&to_sixd(r).0);
            }
        }
        Self::new(Tensor::matrix(translations.len(), DANCE_CHANNELS, data).map_err(|e| SequenceError::Mismatch(e.to_string()))?, fps)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn translation(&self, t: usize) -> Vec3 {
        let r = self.frames.row(t);
        Vec3::new(r[0], r[1], r[2])
    }

    pub fn rotation(&self, t: usize, joint: usize) -> Mat3 {
        from_sixd(&Rotation6D::from_slice(&self.frames.row(t)[3 + 6 * joint..])).expect("validated")
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self, SequenceError> {
        let frames = self.frames.slice(0, start, end).map_err(|e| SequenceError::Mismatch(e.to_string()))?;
        Self::new(frames, self.fps)
    }

    /// Resample to `fps_out`: slerp for joints, linear for the root.
    pub fn resample(&self, fps_out: f64) -> Result<Self, SequenceError> {
        let t = self.len();
        let trans: Vec<Vec3> = (0..t).map(|f| self.translation(f)).collect();
        let trans = crate::rotations::lerp_resample(&trans, self.fps, fps_out)
            .map_err(|source| SequenceError::Rotation { frame: 0, joint: 0, source })?;
        let mut per_frame: Vec<Vec<Mat3>> = vec![Vec::with_capacity(NUM_JOINTS); trans.len()];
        for j in 0..NUM_JOINTS {
            let seq: Vec<Mat3> = (0..t).map(|f| self.rotation(f, j)).collect();
            let out = crate::rotations::slerp_resample(&seq, self.fps, fps_out)
                .map_err(|source| SequenceError::Rotation { frame: 0, joint: j, source })?;
            for (f, r) in out.into_iter().enumerate() {
                per_frame[f].push(r);
            }
        }
        Self::from_parts(&trans, &per_frame, fps_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordQuality {
    Major,
    Minor,
}

impl ChordQuality {
    pub fn intervals(self) -> [usize; 3] {
        match self {
            ChordQuality::Major => [0, 4, 7],
            ChordQuality::Minor => [0, 3, 7],
        }
    }
}

pub const PITCH_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// A chord root (pitch class, C = 0) and quality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChordSeed {
    pub root: u8,
    pub quality: ChordQuality,
}

impl ChordSeed {
    pub fn new(root: u8, quality: ChordQuality) -> Self {
        ChordSeed { root: root % 12, quality }
    }

    pub fn transpose(self, semitones: i32) -> Self {
        Self::new((i32::from(self.root) + semitones).rem_euclid(12) as u8, self.quality)
    }

    /// Decoder start token for music generation: the triad plus beat = 1.
    pub fn start_token(self) -> [f64; SYMBOLIC_CHANNELS] {
        let mut t = [0.0; SYMBOLIC_CHANNELS];
        t[..12].copy_from_slice(&chord_to_chroma(self));
        t[12] = 1.0;
        t
    }
}

impl fmt::Display for ChordSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = match self.quality {
            ChordQuality::Major => "major",
            ChordQuality::Minor => "minor",
        };
        write!(f, "{} {q}", PITCH_NAMES[self.root as usize])
    }
}

impl FromStr for ChordSeed {
    type Err = String;

    /// Parses `"A minor"`, `"C# major"` or `"Am"`.
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (name, quality) = if let Some((n, q)) = s.split_once(char::is_whitespace) {
            let q = match q.trim().to_ascii_lowercase().as_str() {
                "major" | "maj" => ChordQuality::Major,
                "minor" | "min" => ChordQuality::Minor,
                other => return Err(format!("unknown chord quality `{other}`")),
            };
            (n, q)
        } else if let Some(n) = s.strip_suffix('m') {
            (n, ChordQuality::Minor)
        } else {
            (s, ChordQuality::Major)
        };
        let root = PITCH_NAMES
            .iter()
            .position(|p| p.eq_ignore_ascii_case(name))
            .ok_or_else(|| format!("unknown pitch `{name}`"))?;
        Ok(ChordSeed::new(root as u8, quality))
    }
}

/// Indicator vector of the chord's triad.
pub fn chord_to_chroma(seed: ChordSeed) -> [f64; 12] {
    let mut c = [0.0; 12];
    for i in seed.quality.intervals() {
        c[(seed.root as usize + i) % 12] = 1.0;
    }
    c
}

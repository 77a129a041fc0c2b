//! Synthetic paired music/dance data with known beat alignment.
//!
//! Music beats fall on a fixed grid. Each dance beat either sits on its music
//! beat or halfway to the next one, chosen per beat with probability
//! `alignment`. Between dance beats every joint swings from one extreme to
//! the other with a triangular speed profile and holds still for one frame at
//! each beat, so the average joint speed has exactly one strict local
//! minimum per dance beat.

use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{ChordQuality, ChordSeed, DanceSequence, MusicSequence, Pair, PairedDataset, Split, BEAT, CHROMA, MFCC, MFCC_DELTA, MUSIC_CHANNELS};
use crate::rng::{self, Rng};
use crate::rotations::{axis_angle_to_matrix, Mat3, Vec3};
use crate::skeleton::NUM_JOINTS;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Genre {
    Waltz,
    Hiphop,
    Pop,
}

impl Genre {
    pub const ALL: [Genre; 3] = [Genre::Waltz, Genre::Hiphop, Genre::Pop];

    pub fn name(self) -> &'static str {
        match self {
            Genre::Waltz => "waltz",
            Genre::Hiphop => "hiphop",
            Genre::Pop => "pop",
        }
    }

    /// Beat period in frames at 25 fps. At least 12 so that a half-period
    /// offset lands more than 5 frames from every music beat.
    pub fn period(self) -> usize {
        match self {
            Genre::Waltz => 15,
            Genre::Hiphop => 14,
            Genre::Pop => 12,
        }
    }

    fn beats_per_bar(self) -> usize {
        match self {
            Genre::Waltz => 3,
            _ => 4,
        }
    }

    /// Chord progression as (semitones above the key root, quality).
    fn progression(self) -> &'static [(u8, ChordQuality)] {
        use ChordQuality::*;
        match self {
            Genre::Waltz => &[(0, Major), (5, Major), (7, Major), (0, Major)],
            Genre::Hiphop => &[(0, Minor), (8, Major), (3, Major), (10, Major)],
            Genre::Pop => &[(0, Major), (7, Major), (9, Minor), (5, Major)],
        }
    }

    fn amplitude(self) -> f64 {
        match self {
            Genre::Waltz => 0.25,
            Genre::Hiphop => 0.35,
            Genre::Pop => 0.3,
        }
    }
}

impl FromStr for Genre {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Genre::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown genre `{s}` (waltz, hiphop, pop)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub genre: Genre,
    /// Fraction of dance beats placed on a music beat.
    pub alignment: f64,
    pub fps: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { genre: Genre::Pop, alignment: 1.0, fps: super::DEFAULT_FPS }
    }
}

/// Generate one pair of `t` frames. Deterministic in `seed`.
pub fn synth_pair(seed: u64, t: usize, opts: &SynthOptions) -> (MusicSequence, DanceSequence) {
    assert!(t >= 2, "synth_pair needs at least 2 frames");
    let mut g = rng::seeded(seed);
    let genre = opts.genre;
    let p = genre.period();
    let half = p / 2;
    let offset = rng::below(&mut g, p);
    let prog = genre.progression();
    let first = prog[0];
    let key = ChordSeed::new(rng::below(&mut g, 12) as u8, first.1);

    // beat grid, padded with virtual beats on each side
    let first_k = -2i64;
    let last_k = ((t as i64 - offset as i64) / p as i64) + 1;
    let mut dance_beats = Vec::new();
    for k in first_k..=last_k {
        let b = offset as i64 + k * p as i64;
        let aligned = rng::uniform(&mut g, 0.0, 1.0) < opts.alignment;
        dance_beats.push(if aligned { b } else { b + half as i64 });
    }

    let sway = swing_profile(&dance_beats, t);

    // music
    let mut frames = vec![0.0; t * MUSIC_CHANNELS];
    let rho: f64 = 0.9;
    let innov = (1.0 - rho * rho).sqrt();
    let mut state = [0.0f64; 20];
    for s in state.iter_mut() {
        *s = rng::normal(&mut g);
    }
    for f in 0..t {
        let row = &mut frames[f * MUSIC_CHANNELS..(f + 1) * MUSIC_CHANNELS];
        let is_beat = f >= offset && (f - offset).is_multiple_of(p);
        for (c, s) in state.iter_mut().enumerate() {
            if f > 0 {
                *s = rho * *s + innov * rng::normal(&mut g);
            }
            row[MFCC.start + c] = *s;
        }
        if is_beat {
            row[MFCC.start] += 1.0;
        }
        let beat_idx = (f as i64 - offset as i64).div_euclid(p as i64);
        let bar = beat_idx.div_euclid(genre.beats_per_bar() as i64);
        let (deg, q) = prog[bar.rem_euclid(prog.len() as i64) as usize];
        let chord = ChordSeed::new(key.root + deg, q);
        let iv = q.intervals();
        for bin in 0..12 {
            row[CHROMA.start + bin] = rng::uniform(&mut g, 0.0, 0.15);
        }
        for (w, i) in [1.0, 0.75, 0.65].into_iter().zip(iv) {
            let bin = (chord.root as usize + i) % 12;
            row[CHROMA.start + bin] = (w + rng::uniform(&mut g, -0.05, 0.0)).clamp(0.0, 1.0);
        }
        row[BEAT] = if is_beat { 1.0 } else { 0.0 };
    }
    for f in 0..t {
        for c in 0..20 {
            let prev = if f == 0 { frames[c] } else { frames[(f - 1) * MUSIC_CHANNELS + c] };
            frames[f * MUSIC_CHANNELS + MFCC_DELTA.start + c] = frames[f * MUSIC_CHANNELS + c] - prev;
        }
    }
    let music = MusicSequence::new(Tensor::matrix(t, MUSIC_CHANNELS, frames).expect("sized"), opts.fps)
        .expect("synthetic music is valid")
        .with_key(key);

    // dance
    let amp = genre.amplitude();
    let mut axes = Vec::with_capacity(NUM_JOINTS);
    let mut amps = Vec::with_capacity(NUM_JOINTS);
    let mut bases = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let a = Vec3::new(rng::normal(&mut g), rng::normal(&mut g), rng::normal(&mut g)).normalize();
        axes.push(a);
        let scale = if j == 0 { 0.3 } else { 1.0 };
        amps.push(scale * amp * rng::uniform(&mut g, 0.5, 1.0));
        bases.push(Vec3::new(rng::normal(&mut g), rng::normal(&mut g), rng::normal(&mut g)) * 0.08);
    }
    let sway_dir = rng::uniform(&mut g, 0.03, 0.08);
    let mut trans = Vec::with_capacity(t);
    let mut rots = Vec::with_capacity(t);
    for &c in &sway {
        trans.push(Vec3::new(sway_dir * c, 0.9, 0.0));
        let r: Vec<Mat3> = (0..NUM_JOINTS).map(|j| axis_angle_to_matrix(bases[j] + axes[j] * (amps[j] * c))).collect();
        rots.push(r);
    }
    let dance = DanceSequence::from_parts(&trans, &rots, opts.fps).expect("synthetic dance is valid");
    (music, dance)
}

/// Swing coordinate in [-1, 1] per frame: holds at ±1 on a beat frame and
/// the frame after, then moves to the opposite extreme by the next beat.
fn swing_profile(beats: &[i64], t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    for f in 0..t as i64 {
        let k = beats.iter().rposition(|&b| b <= f).expect("padded grid starts before frame 0");
        let from = if k % 2 == 0 { 1.0 } else { -1.0 };
        let (da, db) = (beats[k], beats[k + 1]);
        let u = ((f - da - 1) as f64 / (db - da - 1) as f64).clamp(0.0, 1.0);
        let s = if u < 0.5 { 2.0 * u * u } else { 1.0 - 2.0 * (1.0 - u) * (1.0 - u) };
        out.push(from - 2.0 * from * s);
    }
    out
}

/// `n_train + n_test` pairs cycling through the genres.
pub fn synth_dataset(seed: u64, n_train: usize, n_test: usize, t: usize, alignment: f64) -> PairedDataset {
    let mut g: Rng = rng::substream(seed, rng::stream::DATA);
    let mut pairs = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let genre = Genre::ALL[i % 3];
        let opts = SynthOptions { genre, alignment, ..Default::default() };
        let (m, d) = synth_pair(g.next_u64(), t, &opts);
        let split = if i < n_train { Split::Train } else { Split::Test };
        pairs.push(Pair::new(m, d, genre.name(), split).expect("synthetic pair is consistent"));
    }
    PairedDataset { pairs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let o = SynthOptions::default();
        assert_eq!(synth_pair(5, 40, &o), synth_pair(5, 40, &o));
        assert_ne!(synth_pair(5, 40, &o).0, synth_pair(6, 40, &o).0);
    }

    #[test]
    fn beat_grid_matches_period() {
        for genre in Genre::ALL {
            let (m, _) = synth_pair(11, 100, &SynthOptions { genre, ..Default::default() });
            let b = m.beat_frames();
            assert!(b.len() >= 6);
            assert!(b.windows(2).all(|w| w[1] - w[0] == genre.period()));
            assert!(b[0] < genre.period());
        }
    }

    #[test]
    fn swing_holds_on_beats() {
        let s = swing_profile(&[-5, 4, 10, 22, 40], 30);
        assert_eq!(s[4], s[5]);
        assert_eq!(s[10], s[11]);
        assert_eq!(s[4], -1.0);
        assert_eq!(s[10], 1.0);
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn genre_parse() {
        assert_eq!("HipHop".parse::<Genre>().unwrap(), Genre::Hiphop);
        assert!("polka".parse::<Genre>().is_err());
    }
}

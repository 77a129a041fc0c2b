//! Evaluation metrics: Fréchet distance, diversity, beat alignment and notes
//! accuracy, plus the aggregated [`EvalReport`].
//!
//! Distances are in skeleton units (meters for the canonical skeleton).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ChordQuality, DanceSequence, MusicSequence, Pair, PITCH_NAMES};
use crate::model::{random_start, Direction, Generator, ModelError};
use crate::rng;
use crate::rotations::Vec3;
use crate::skeleton::{Skeleton, SkeletonError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sequence lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least 2 generations, got {0}")]
    TooFew(usize),
    #[error("frame {frame}: {source}")]
    Skeleton { frame: usize, source: SkeletonError },
    #[error("invalid generated sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Beat-matching window in seconds.
pub const BEAT_WINDOW_SECONDS: f64 = 0.2;

/// Joint positions for every frame, `T × 24`.
pub fn joint_positions(d: &DanceSequence, sk: &Skeleton) -> Result<Vec<Vec<Vec3>>> {
    (0..d.len())
        .map(|f| sk.frame_positions(d.frame(f)).map_err(|source| MetricError::Skeleton { frame: f, source }))
        .collect()
}

/// Mean Euclidean distance between corresponding joints over all frames.
pub fn frechet_distance(generated: &DanceSequence, truth: &DanceSequence, sk: &Skeleton) -> Result<f64> {
    if generated.len() != truth.len() {
        return Err(MetricError::Length(generated.len(), truth.len()));
    }
    let a = joint_positions(generated, sk)?;
    let b = joint_positions(truth, sk)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.iter().zip(&b) {
        for (pa, pb) in fa.iter().zip(fb) {
            sum += (pa - pb).norm();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Mean over frames and joints of the population standard deviation of the
/// joint position across generations, `sqrt(mean ‖p − p̄‖²)`.
///
/// The variance is summed over pairs, `Σ_{k<l} ‖p_k − p_l‖² / K²`, so
/// identical generations give exactly zero.
pub fn diversity(generations: &[DanceSequence], sk: &Skeleton) -> Result<f64> {
    if generations.len() < 2 {
        return Err(MetricError::TooFew(generations.len()));
    }
    let t = generations[0].len();
    if let Some(g) = generations.iter().find(|g| g.len() != t) {
        return Err(MetricError::Length(t, g.len()));
    }
    let pos: Vec<_> = generations.iter().map(|g| joint_positions(g, sk)).collect::<Result<_>>()?;
    let k = pos.len() as f64;
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in 0..t {
        for j in 0..pos[0][f].len() {
            let mut var = 0.0;
            for a in 0..pos.len() {
                for b in a + 1..pos.len() {
                    var += (pos[a][f][j] - pos[b][f][j]).norm_squared();
                }
            }
            let var = var / (k * k);
            sum += var.sqrt();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Average joint speed between consecutive frames; entry `t` is the motion
/// from frame `t` to `t + 1`.
pub fn joint_speeds(positions: &[Vec<Vec3>]) -> Vec<f64> {
    positions
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).norm()).sum::<f64>() / w[0].len() as f64)
        .collect()
}

/// Strict local minima. A run of equal values counts once, at its first
/// index, when both neighbors of the run are larger. Runs touching either end
/// never count.
pub fn kinematic_beats(speed: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < speed.len() {
        let mut j = i;
        while j + 1 < speed.len() && speed[j + 1] == speed[i] {
            j += 1;
        }
        if j + 1 < speed.len() && speed[i - 1] > speed[i] && speed[j + 1] > speed[i] {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeatAlignment {
    /// `100 × matched / kinematic beats`, 0 when there are none.
    pub percent: f64,
    pub kinematic_beats: usize,
    pub matched: usize,
    /// No kinematic beats were found.
    pub empty: bool,
}

/// Share of kinematic beats within `window` frames of some music beat.
pub fn alignment_percent(kinematic: &[usize], music: &[usize], window: usize) -> BeatAlignment {
    let matched = kinematic
        .iter()
        .filter(|&&k| music.iter().any(|&m| k.abs_diff(m) <= window))
        .count();
    let n = kinematic.len();
    BeatAlignment {
        percent: if n == 0 { 0.0 } else { 100.0 * matched as f64 / n as f64 },
        kinematic_beats: n,
        matched,
        empty: n == 0,
    }
}

/// Beat alignment of a dance against the music's beat channel.
pub fn beats_alignment(dance: &DanceSequence, music: &MusicSequence, sk: &Skeleton) -> Result<BeatAlignment> {
    if dance.len() != music.len() {
        return Err(MetricError::Length(dance.len(), music.len()));
    }
    let speed = joint_speeds(&joint_positions(dance, sk)?);
    let window = (BEAT_WINDOW_SECONDS * dance.fps).round() as usize;
    let a = alignment_percent(&kinematic_beats(&speed), &music.beat_frames(), window);
    if a.empty {
        log::warn!("dance has no kinematic beats; alignment scored 0");
    }
    Ok(a)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Semitone shift that moves the piece's key to C major or A minor. The root
/// is the argmax of the time-summed chroma; the quality comes from the key
/// metadata, defaulting to major.
pub fn key_shift(m: &MusicSequence) -> usize {
    let mut total = [0.0; 12];
    for t in 0..m.len() {
        for (s, c) in total.iter_mut().zip(m.chroma(t)) {
            *s += c;
        }
    }
    let root = argmax(&total);
    let target = match m.key.map(|k| k.quality) {
        Some(ChordQuality::Minor) => 9,
        _ => 0,
    };
    (target + 12 - root) % 12
}

/// Per-frame note after transposition, `None` for all-zero chroma frames.
pub fn transposed_notes(m: &MusicSequence) -> Vec<Option<usize>> {
    let shift = key_shift(m);
    (0..m.len())
        .map(|t| {
            let c = m.chroma(t);
            if c.iter().all(|&v| v == 0.0) {
                None
            } else {
                Some((argmax(c) + shift) % 12)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotesAccuracy {
    /// Fraction of compared frames whose transposed notes agree.
    pub accuracy: f64,
    pub compared: usize,
    /// Frames skipped because either piece had all-zero chroma.
    pub skipped: usize,
}

pub fn notes_accuracy(generated: &MusicSequence, truth: &MusicSequence) -> Result<NotesAccuracy> {
    if generated.len() != truth.len() {
        return Err(MetricError::Length(generated.len(), truth.len()));
    }
    let a = transposed_notes(generated);
    let b = transposed_notes(truth);
    let (mut hits, mut compared) = (0, 0);
    for (x, y) in a.iter().zip(&b) {
        if let (Some(x), Some(y)) = (x, y) {
            compared += 1;
            hits += usize::from(x == y);
        }
    }
    let skipped = a.len() - compared;
    if skipped > 0 {
        log::warn!("{skipped} all-zero chroma frames skipped");
    }
    Ok(NotesAccuracy { accuracy: if compared == 0 { 0.0 } else { hits as f64 / compared as f64 }, compared, skipped })
}

/// Counts of transposed notes.
pub fn note_histogram(m: &MusicSequence) -> [usize; 12] {
    let mut h = [0; 12];
    for n in transposed_notes(m).into_iter().flatten() {
        h[n] += 1;
    }
    h
}

/// Per-frame note table: `frame,note,name,beat`. Silent frames have an
/// empty note.
pub fn notes_csv(m: &MusicSequence) -> String {
    let mut s = String::from("frame,note,name,beat\n");
    for (t, n) in transposed_notes(m).into_iter().enumerate() {
        let (idx, name) = n.map_or((String::new(), ""), |n| (n.to_string(), PITCH_NAMES[n]));
        let _ = writeln!(s, "{t},{idx},{name},{}", m.beat(t));
    }
    s
}

/// Grouped bar chart of note frequencies, one series per piece.
pub fn note_histogram_svg(series: &[(&str, &MusicSequence)]) -> String {
    const COLORS: [&str; 4] = ["#4477aa", "#ee6677", "#228833", "#ccbb44"];
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let hists: Vec<[f64; 12]> = series
        .iter()
        .map(|(_, m)| {
            let c = note_histogram(m);
            let n = c.iter().sum::<usize>().max(1) as f64;
            c.map(|v| v as f64 / n)
        })
        .collect();
    let top = hists.iter().flatten().copied().fold(0.0, f64::max).max(1e-9);
    let slot = (w - 2.0 * pad) / 12.0;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<title>Histogram of music notes</title>"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#, y = h - pad, x2 = w - pad);
    for (k, hist) in hists.iter().enumerate() {
        for (n, v) in hist.iter().enumerate() {
            let bh = v / top * (h - 2.0 * pad);
            let x = pad + n as f64 * slot + slot * 0.1 + k as f64 * bar;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{bh:.2}" fill="{c}"/>"#,
                y = h - pad - bh,
                c = COLORS[k % COLORS.len()]
            );
        }
    }
    for (n, name) in PITCH_NAMES.iter().enumerate() {
        let x = pad + (n as f64 + 0.5) * slot;
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{y}" font-size="11" text-anchor="middle">{name}</text>"#, y = h - pad + 15.0);
    }
    for (k, (label, _)) in series.iter().enumerate() {
        let y = 15.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{c}"/>"#, x = w - 150.0, y = y - 9.0, c = COLORS[k % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" font-size="11">{label}</text>"#, x = w - 135.0, label = xml_escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Metrics of one test sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub index: usize,
    pub genre: String,
    pub frames: usize,
    pub frechet: f64,
    pub diversity: f64,
    pub beats_alignment: f64,
    pub kinematic_beats: usize,
    pub notes_accuracy: f64,
    pub skipped_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenreSummary {
    pub sequences: usize,
    pub frechet: f64,
    pub diversity: f64,
    pub beats_alignment: f64,
    pub notes_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Meters.
    pub frechet: f64,
    /// Meters.
    pub diversity: f64,
    /// Percent.
    pub beats_alignment: f64,
    /// Fraction.
    pub notes_accuracy: f64,
    pub per_genre: BTreeMap<String, GenreSummary>,
    pub sequences: Vec<SequenceRow>,
}

impl EvalReport {
    /// Aggregate per-sequence rows by plain averaging.
    pub fn from_rows(sequences: Vec<SequenceRow>) -> Self {
        let summarize = |rows: &[&SequenceRow]| {
            let n = rows.len().max(1) as f64;
            GenreSummary {
                sequences: rows.len(),
                frechet: rows.iter().map(|r| r.frechet).sum::<f64>() / n,
                diversity: rows.iter().map(|r| r.diversity).sum::<f64>() / n,
                beats_alignment: rows.iter().map(|r| r.beats_alignment).sum::<f64>() / n,
                notes_accuracy: rows.iter().map(|r| r.notes_accuracy).sum::<f64>() / n,
            }
        };
        let mut groups: BTreeMap<String, Vec<&SequenceRow>> = BTreeMap::new();
        for r in &sequences {
            groups.entry(r.genre.clone()).or_default().push(r);
        }
        let per_genre = groups.iter().map(|(g, rows)| (g.clone(), summarize(rows))).collect();
        let all: Vec<&SequenceRow> = sequences.iter().collect();
        let total = summarize(&all);
        EvalReport {
            frechet: total.frechet,
            diversity: total.diversity,
            beats_alignment: total.beats_alignment,
            notes_accuracy: total.notes_accuracy,
            per_genre,
            sequences,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=100.0).contains(&self.beats_alignment)
            && (0.0..=1.0).contains(&self.notes_accuracy)
            && self.frechet >= 0.0
            && self.diversity >= 0.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per sequence.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.sequences {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
    }
}

/// How test sequences are generated for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Generation window; longer inputs are generated in chained windows.
    pub chunk: usize,
    /// Generations per music input for diversity.
    pub generations: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { chunk: 75, generations: 5, seed: 0 }
    }
}

/// Generate from every pair with both models and score the results. Each
/// pair's generated dance and music are compared with its ground truth.
/// Generated music inherits the ground-truth key metadata.
pub fn evaluate(md: &Generator, dm: &Generator, pairs: &[&Pair], sk: &Skeleton, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.generations < 2 {
        return Err(MetricError::TooFew(opts.generations));
    }
    let mut starts = rng::substream(opts.seed, rng::stream::START_TOKENS);
    let mut rows = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let x = p.music.full();
        let mut dances = Vec::with_capacity(opts.generations);
        for _ in 0..opts.generations {
            let start = random_start(Direction::MusicToDance, &mut starts);
            let y = md.generate_chunked(&x, &start, opts.chunk)?;
            dances.push(DanceSequence::new(y, p.dance.fps).map_err(|e| MetricError::Sequence(e.to_string()))?);
        }
        let start = random_start(Direction::DanceToMusic, &mut starts);
        let xs = dm.generate_chunked(p.dance.frames(), &start, opts.chunk)?;
        let mut music = MusicSequence::from_generated(&xs, p.music.fps).map_err(|e| MetricError::Sequence(e.to_string()))?;
        music.key = p.music.key;
        let beats = beats_alignment(&dances[0], &p.music, sk)?;
        let notes = notes_accuracy(&music, &p.music)?;
        rows.push(SequenceRow {
            index,
            genre: p.genre.clone(),
            frames: p.music.len(),
            frechet: frechet_distance(&dances[0], &p.dance, sk)?,
            diversity: diversity(&dances, sk)?,
            beats_alignment: beats.percent,
            kinematic_beats: beats.kinematic_beats,
            notes_accuracy: notes.accuracy,
            skipped_frames: notes.skipped,
        });
    }
    Ok(EvalReport::from_rows(rows))
}

//! Domain metrics and training losses.
//!
//! The dance metric is the L1 distance between root translations plus the
//! squared geodesic distance of every joint rotation, summed over frames.
//! The music metric is the L1 distance over chroma and beat channels only;
//! MFCC channels never contribute.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DanceSequence, MusicSequence, DANCE_CHANNELS, SYMBOLIC_CHANNELS};
use crate::rotations::{from_sixd, geodesic, Rotation6D, RotationError};
use crate::skeleton::NUM_JOINTS;
use crate::tensor::{Axis, Tape, Tensor, TensorError, Unary, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("frame counts differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("frame rates differ: {0} vs {1}")]
    Fps(f64, f64),
    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("frame {frame}, joint {joint}: {source}")]
    Rotation { frame: usize, joint: usize, source: RotationError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dance metric on raw `T×147` frames.
pub fn dance_metric_frames(y: &Tensor, yt: &Tensor) -> Result<f64, LossError> {
    check_pair(y, yt, DANCE_CHANNELS)?;
    let mut total = 0.0;
    for f in 0..y.rows() {
        let (a, b) = (y.row(f), yt.row(f));
        total += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>();
        for j in 0..NUM_JOINTS {
            let r = rot(a, f, j)?;
            let rt = rot(b, f, j)?;
            total += geodesic(&r, &rt).powi(2);
        }
    }
    Ok(total)
}

fn rot(frame: &[f64], f: usize, j: usize) -> Result<crate::rotations::Mat3, LossError> {
    from_sixd(&Rotation6D::from_slice(&frame[3 + 6 * j..])).map_err(|source| LossError::Rotation { frame: f, joint: j, source })
}

fn check_pair(a: &Tensor, b: &Tensor, channels: usize) -> Result<(), LossError> {
    if a.cols() != channels {
        return Err(LossError::Channels { expected: channels, got: a.cols() });
    }
    if b.cols() != channels {
        return Err(LossError::Channels { expected: channels, got: b.cols() });
    }
    if a.rows() != b.rows() {
        return Err(LossError::Length(a.rows(), b.rows()));
    }
    Ok(())
}

pub fn dance_metric(y: &DanceSequence, yt: &DanceSequence) -> Result<f64, LossError> {
    if y.fps != yt.fps {
        return Err(LossError::Fps(y.fps, yt.fps));
    }
    dance_metric_frames(y.frames(), yt.frames())
}

/// Music metric on `T×13` symbolic frames.
pub fn music_metric_symbolic(x: &Tensor, xt: &Tensor) -> Result<f64, LossError> {
    check_pair(x, xt, SYMBOLIC_CHANNELS)?;
    Ok(x.data().iter().zip(xt.data()).map(|(a, b)| (a - b).abs()).sum())
}

pub fn music_metric(x: &MusicSequence, xt: &MusicSequence) -> Result<f64, LossError> {
    music_metric_symbolic(&x.symbolic(), &xt.symbolic())
}

/// Norm floor inside the differentiable Gram-Schmidt; keeps `sqrt` smooth at 0.
const NORM_EPS: f64 = 1e-24;

/// Differentiable dance metric of a predicted `T×147` node against fixed
/// targets. Returns a `1×1` node.
pub fn dance_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var, LossError> {
    let (t, c) = tape.value(pred).dims2("dance_loss")?;
    if c != DANCE_CHANNELS {
        return Err(LossError::Channels { expected: DANCE_CHANNELS, got: c });
    }
    check_pair(tape.value(pred), target, DANCE_CHANNELS)?;

    let trans = tape.slice(pred, 1, 0, 3)?;
    let tt = tape.constant(target.slice(1, 0, 3)?)?;
    let neg = tape.scale(tt, -1.0)?;
    let diff = tape.add(trans, neg)?;
    let ad = tape.abs(diff)?;
    let l1 = tape.sum(ad, Axis::All)?;

    let n = t * NUM_JOINTS;
    let rots = tape.slice(pred, 1, 3, DANCE_CHANNELS)?;
    let rots = tape.reshape(rots, n, 6)?;
    let a1 = tape.slice(rots, 1, 0, 3)?;
    let a2 = tape.slice(rots, 1, 3, 6)?;
    let b1 = normalize_rows(tape, a1)?;
    let dot = row_dot(tape, b1, a2)?;
    let proj = tape.mul(b1, dot)?;
    let proj = tape.scale(proj, -1.0)?;
    let u2 = tape.add(a2, proj)?;
    let b2 = normalize_rows(tape, u2)?;
    let b3 = cross_rows(tape, b1, b2)?;

    // target frames as unit columns
    let mut cols = [vec![0.0; n * 3], vec![0.0; n * 3], vec![0.0; n * 3]];
    for f in 0..t {
        let row = target.row(f);
        for j in 0..NUM_JOINTS {
            let r = rot(row, f, j)?;
            let k = f * NUM_JOINTS + j;
            for (ci, col) in cols.iter_mut().enumerate() {
                for e in 0..3 {
                    col[k * 3 + e] = r[(e, ci)];
                }
            }
        }
    }
    let mut trace = None;
    for (b, col) in [b1, b2, b3].into_iter().zip(cols) {
        let tc = tape.constant(Tensor::matrix(n, 3, col)?)?;
        let d = row_dot(tape, b, tc)?;
        trace = Some(match trace {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
    }
    let trace = trace.expect("three columns");
    let minus_one = tape.scalar(-1.0)?;
    let shifted = tape.add(trace, minus_one)?;
    let cosv = tape.scale(shifted, 0.5)?;
    let ang2 = tape.unary(cosv, Unary::AcosSquared)?;
    let geo = tape.sum(ang2, Axis::All)?;
    Ok(tape.add(l1, geo)?)
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let sq = tape.square(x)?;
    let s = tape.sum(sq, Axis::Cols)?;
    let eps = tape.scalar(NORM_EPS)?;
    let s = tape.add(s, eps)?;
    let n = tape.sqrt(s)?;
    let inv = tape.recip(n)?;
    tape.mul(x, inv)
}

fn row_dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let p = tape.mul(a, b)?;
    tape.sum(p, Axis::Cols)
}

fn cross_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let ac: Vec<Var> = (0..3).map(|i| tape.slice(a, 1, i, i + 1)).collect::<Result<_, _>>()?;
    let bc: Vec<Var> = (0..3).map(|i| tape.slice(b, 1, i, i + 1)).collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(3);
    for (i, j) in [(1, 2), (2, 0), (0, 1)] {
        let l = tape.mul(ac[i], bc[j])?;
        let r = tape.mul(ac[j], bc[i])?;
        let r = tape.scale(r, -1.0)?;
        out.push(tape.add(l, r)?);
    }
    tape.concat(&out, 1)
}

/// Differentiable music metric of a `T×13` prediction against fixed targets.
pub fn music_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var, LossError> {
    check_pair(tape.value(pred), target, SYMBOLIC_CHANNELS)?;
    let tt = tape.constant(target.clone())?;
    let neg = tape.scale(tt, -1.0)?;
    let d = tape.add(pred, neg)?;
    let a = tape.abs(d)?;
    Ok(tape.sum(a, Axis::All)?)
}

/// How per-sample losses are combined across a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dance_reconstruction: f64,
    pub music_reconstruction: f64,
    pub dance_cycle: f64,
    pub music_cycle: f64,
    pub gw: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dance_reconstruction: 1.0, music_reconstruction: 1.0, dance_cycle: 1.0, music_cycle: 1.0, gw: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { dance_reconstruction: 0.0, music_reconstruction: 0.0, dance_cycle: 0.0, music_cycle: 0.0, gw: 0.0 }
    }
}

/// Loss components of one training step, unweighted, plus the weighted total
/// routed to each generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dance_reconstruction: f64,
    pub music_reconstruction: f64,
    pub dance_cycle: f64,
    pub music_cycle: f64,
    pub gw: f64,
    /// Weighted GW + dance reconstruction + dance cycle.
    pub total_music_to_dance: f64,
    /// Weighted music reconstruction + music cycle.
    pub total_dance_to_music: f64,
}

impl LossBreakdown {
    pub fn is_valid(&self) -> bool {
        [self.dance_reconstruction, self.music_reconstruction, self.dance_cycle, self.music_cycle, self.gw]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.total_music_to_dance = w.gw * self.gw + w.dance_reconstruction * self.dance_reconstruction + w.dance_cycle * self.dance_cycle;
        self.total_dance_to_music = w.music_reconstruction * self.music_reconstruction + w.music_cycle * self.music_cycle;
        self
    }
}

/// One row of the CSV training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub dance_reconstruction: f64,
    pub music_reconstruction: f64,
    pub dance_cycle: f64,
    pub music_cycle: f64,
    pub gw: f64,
    pub total_music_to_dance: f64,
    pub total_dance_to_music: f64,
    pub learning_rate: f64,
}

impl LogRow {
    pub fn new(step: u64, b: &LossBreakdown, lr: f64) -> Self {
        LogRow {
            step,
            dance_reconstruction: b.dance_reconstruction,
            music_reconstruction: b.music_reconstruction,
            dance_cycle: b.dance_cycle,
            music_cycle: b.music_cycle,
            gw: b.gw,
            total_music_to_dance: b.total_music_to_dance,
            total_dance_to_music: b.total_dance_to_music,
            learning_rate: lr,
        }
    }
}

/// Streaming CSV writer for the training log.
pub struct TrainingLog<W: std::io::Write> {
    w: csv::Writer<W>,
}

impl<W: std::io::Write> TrainingLog<W> {
    pub fn new(inner: W) -> Self {
        TrainingLog { w: csv::Writer::from_writer(inner) }
    }

    pub fn push(&mut self, row: &LogRow) -> Result<(), csv::Error> {
        self.w.serialize(row)?;
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_log<R: std::io::Read>(r: R) -> Result<Vec<LogRow>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotations::{axis_angle_to_matrix, to_sixd, Vec3};
    use crate::rng;

    fn random_dance(t: usize, seed: u64) -> Tensor {
        let mut g = rng::seeded(seed);
        let mut data = Vec::new();
        for _ in 0..t {
            for _ in 0..3 {
                data.push(rng::normal(&mut g));
            }
            for _ in 0..NUM_JOINTS {
                let v = Vec3::new(rng::normal(&mut g), rng::normal(&mut g), rng::normal(&mut g));
                data.extend_from_slice(&to_sixd(&axis_angle_to_matrix(v)).0);
            }
        }
        Tensor::matrix(t, DANCE_CHANNELS, data).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let y = random_dance(4, 1);
        assert!(dance_metric_frames(&y, &y).unwrap() < 1e-12);
    }

    #[test]
    fn translation_offset_counts_per_frame() {
        let y = random_dance(75, 2);
        let mut yt = y.clone();
        for f in 0..75 {
            yt.set(f, 0, y.get(f, 0) + 1.0);
        }
        let v = dance_metric_frames(&y, &yt).unwrap();
        assert!((v - 75.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn quarter_turn_adds_pi_sq_over_four() {
        let y = random_dance(3, 3);
        let mut yt = y.clone();
        let r = axis_angle_to_matrix(Vec3::new(0.2, -0.4, 0.1));
        let q = r * axis_angle_to_matrix(Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
        let base = 3 + 6 * 5;
        for (k, v) in to_sixd(&r).0.iter().enumerate() {
            yt.set(1, base + k, *v);
        }
        let mut y2 = yt.clone();
        for (k, v) in to_sixd(&q).0.iter().enumerate() {
            y2.set(1, base + k, *v);
        }
        let v = dance_metric_frames(&yt, &y2).unwrap();
        assert!((v - std::f64::consts::FRAC_PI_2.powi(2)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn graph_matches_pure() {
        let y = random_dance(5, 4);
        let mut noisy = y.clone();
        let mut g = rng::seeded(9);
        for v in noisy.data_mut() {
            *v += 0.2 * rng::normal(&mut g);
        }
        let mut tape = Tape::new();
        let p = tape.param(noisy.clone()).unwrap();
        let l = dance_loss(&mut tape, p, &y).unwrap();
        let pure = dance_metric_frames(&noisy, &y).unwrap();
        assert!((tape.value(l).item() - pure).abs() < 1e-9 * pure.max(1.0));
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        let y = random_dance(2, 5);
        let mut x = y.clone();
        let mut g = rng::seeded(10);
        for v in x.data_mut() {
            *v += 0.3 * rng::normal(&mut g);
        }
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let p = tape.param(x.clone()).unwrap();
            let l = dance_loss(&mut tape, p, &y).unwrap();
            let v = tape.value(l).item();
            (v, tape.backward_scalar(l).unwrap().wrt(p))
        };
        let (_, grad) = eval(&x);
        let h = 1e-6;
        for k in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-2), "{k}: {an} vs {fd}");
        }
    }

    #[test]
    fn music_metric_ignores_mfcc() {
        let mut a = Tensor::zeros(&[3, 53]);
        let mut b = Tensor::zeros(&[3, 53]);
        a.set(0, 5, 3.0);
        b.set(2, 30, -1.0);
        a.set(1, 44, 0.5);
        b.set(2, 52, 1.0);
        let x = MusicSequence::new(a, 25.0).unwrap();
        let xt = MusicSequence::new(b, 25.0).unwrap();
        assert_eq!(music_metric(&x, &xt).unwrap(), 1.5);
    }

    #[test]
    fn csv_round_trip() {
        let b = LossBreakdown { dance_reconstruction: 1.5, gw: 0.25, ..Default::default() }.with_totals(&LossWeights::default());
        let mut buf = Vec::new();
        {
            let mut log = TrainingLog::new(&mut buf);
            log.push(&LogRow::new(1, &b, 1e-3)).unwrap();
            log.push(&LogRow::new(2, &b, 1e-3)).unwrap();
        }
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,dance_reconstruction,music_reconstruction,dance_cycle,music_cycle,gw,"));
        let rows = read_log(&buf[..]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].total_music_to_dance, 1.75);
    }
}

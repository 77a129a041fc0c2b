//! SO(3) helpers.
//!
//! The 6D encoding stores the first two columns of a rotation matrix in
//! column-major order: `(R11, R21, R31, R12, R22, R32)`. Decoding runs
//! Gram-Schmidt on the two columns and completes the frame with their cross
//! product, so any 6 floats away from the degenerate set map to a rotation.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Norm below which a 6D column is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(&'static str),
    #[error("resampling needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("invalid frame rates: fps_in {fps_in}, fps_out {fps_out}")]
    BadRates { fps_in: f64, fps_out: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(s: &[f64]) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(&s[..6]);
        Rotation6D(a)
    }
}

/// Rodrigues' formula; the vector's magnitude is the angle in radians.
pub fn axis_angle_to_matrix(v: Vec3) -> Mat3 {
    let theta = v.norm();
    if theta < 1e-12 {
        // second-order expansion keeps tiny rotations orthonormal to rounding
        let k = skew(v);
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let k = skew(v / theta);
    Mat3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k
}

/// Inverse of [`axis_angle_to_matrix`], with the angle in `[0, π]`.
pub fn matrix_to_axis_angle(r: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_matrix(r);
    quat_to_axis_angle(&q)
}

fn quat_to_axis_angle(q: &UnitQuaternion<f64>) -> Vec3 {
    let (w, v) = (q.w, q.imag());
    let (w, v) = if w < 0.0 { (-w, -v) } else { (w, v) };
    let s = v.norm();
    if s < 1e-300 {
        return Vec3::zeros();
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

fn skew(v: Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn to_sixd(r: &Mat3) -> Rotation6D {
    Rotation6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

pub fn from_sixd(s: &Rotation6D) -> Result<Mat3, RotationError> {
    let a1 = Vec3::new(s.0[0], s.0[1], s.0[2]);
    let a2 = Vec3::new(s.0[3], s.0[4], s.0[5]);
    let n1 = a1.norm();
    if !(n1 >= DEGENERATE_NORM) {
        return Err(RotationError::Degenerate("first column norm below threshold"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1.dot(&a2) * b1;
    let n2 = u2.norm();
    if !(n2 >= DEGENERATE_NORM) {
        return Err(RotationError::Degenerate("second column parallel to the first"));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// Rotation angle of `r r̃ᵀ`.
pub fn geodesic(r: &Mat3, rt: &Mat3) -> f64 {
    let tr = (r * rt.transpose()).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Spherical interpolation between unit quaternions.
///
/// The sign of `b` is flipped when `a·b < 0` so the short arc is taken. At an
/// exact tie (`a·b = 0`, bracketing rotations a half turn apart) `b` is kept
/// as given, which lies on the closed hemisphere of `a`.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return *b;
    }
    let qa = a.as_ref().coords;
    let mut qb = b.as_ref().coords;
    let mut d = qa.dot(&qb);
    if d < 0.0 {
        qb = -qb;
        d = -d;
    }
    let d = d.min(1.0);
    let coords = if d > 1.0 - 1e-12 {
        qa * (1.0 - t) + qb * t
    } else {
        let omega = d.acos();
        let s = omega.sin();
        qa * (((1.0 - t) * omega).sin() / s) + qb * ((t * omega).sin() / s)
    };
    Unit::new_normalize(Quaternion::from(coords))
}

/// Output frame count and time step when resampling `n` frames.
///
/// The output spans the same interval as the input; the count is the
/// nearest whole number of `fps_out` periods plus one, and the step is the
/// interval divided evenly across it.
pub fn resample_grid(n: usize, fps_in: f64, fps_out: f64) -> (usize, f64) {
    let duration = (n - 1) as f64 / fps_in;
    let n_out = ((duration * fps_out).round() as usize).max(1) + 1;
    (n_out, duration / (n_out - 1) as f64)
}

fn check_rates(n: usize, fps_in: f64, fps_out: f64) -> Result<(), RotationError> {
    if n < 2 {
        return Err(RotationError::TooShort(n));
    }
    if !(fps_out > 0.0 && fps_in >= fps_out && fps_in.is_finite()) {
        return Err(RotationError::BadRates { fps_in, fps_out });
    }
    Ok(())
}

/// Bracketing input index and fraction for output time `t`.
fn bracket(t: f64, fps_in: f64, n: usize) -> (usize, f64) {
    let pos = t * fps_in;
    let i = (pos.floor() as usize).min(n - 2);
    (i, (pos - i as f64).clamp(0.0, 1.0))
}

/// Resample a rotation sequence from `fps_in` to `fps_out` by slerp.
/// Endpoints are copied exactly.
pub fn slerp_resample(seq: &[Mat3], fps_in: f64, fps_out: f64) -> Result<Vec<Mat3>, RotationError> {
    check_rates(seq.len(), fps_in, fps_out)?;
    let n = seq.len();
    let (n_out, step) = resample_grid(n, fps_in, fps_out);
    let quats: Vec<UnitQuaternion<f64>> = seq.iter().map(UnitQuaternion::from_matrix).collect();
    let mut out = Vec::with_capacity(n_out);
    out.push(seq[0]);
    for k in 1..n_out - 1 {
        let (i, f) = bracket(k as f64 * step, fps_in, n);
        out.push(*slerp(&quats[i], &quats[i + 1], f).to_rotation_matrix().matrix());
    }
    out.push(seq[n - 1]);
    Ok(out)
}

/// Linear resampling of vector-valued frames on the same grid as
/// [`slerp_resample`].
pub fn lerp_resample(seq: &[Vec3], fps_in: f64, fps_out: f64) -> Result<Vec<Vec3>, RotationError> {
    check_rates(seq.len(), fps_in, fps_out)?;
    let n = seq.len();
    let (n_out, step) = resample_grid(n, fps_in, fps_out);
    let mut out = Vec::with_capacity(n_out);
    out.push(seq[0]);
    for k in 1..n_out - 1 {
        let (i, f) = bracket(k as f64 * step, fps_in, n);
        out.push(seq[i] * (1.0 - f) + seq[i + 1] * f);
    }
    out.push(seq[n - 1]);
    Ok(out)
}

//! Entropic Gromov-Wasserstein alignment between two embedding batches.
//!
//! Both batches hold `m` points. Intra-batch geometry is the pairwise L1
//! distance. The solver alternates a linearised cost `E` with `L` Sinkhorn
//! scalings of `K = exp(-E/ε)`, for `M` outer projections. Returned plans
//! are normalised to uniform marginals `1/m`.
//!
//! A few numerical choices on top of the textbook iteration:
//!
//! - The uniform start is nudged toward the identity coupling by a relative
//!   `1e-6`, since the exactly uniform plan is a fixed point whenever the
//!   two geometries are isometric.
//! - The cross term of `E` uses the plan at total mass `m` (row sums 1).
//! - The column scaling `b` carries over between outer iterations.
//! - The problem is solved in a canonical orientation (the lexicographically
//!   smaller cost matrix on the rows), which makes the value exactly
//!   symmetric in its arguments.
//! - Sinkhorn switches to the log domain when `ε < 0.05` or when `E/ε`
//!   leaves the range where `exp` is representable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const KERNEL_FLOOR: f64 = 1e-300;
const LOG_FLOOR: f64 = -690.7755; // ln(1e-300)

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GwError {
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("empty batch")]
    Empty,
    #[error("non-finite embedding entry")]
    NonFinite,
    #[error("kernel underflow: a row or column of exp(-E/ε) vanished; regularization ε = {epsilon:?} is too small")]
    KernelUnderflow { epsilon: Option<f64> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kernel must be square and non-empty")]
    KernelShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogDomain {
    Auto,
    Always,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GwConfig {
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub projection_iters: usize,
    /// Carry the Sinkhorn column scaling across outer iterations.
    pub warm_start: bool,
    pub log_domain: LogDomain,
    /// Relative identity bias of the initial plan.
    pub init_bias: f64,
}

impl Default for GwConfig {
    fn default() -> Self {
        GwConfig {
            epsilon: 0.2,
            sinkhorn_iters: 30,
            projection_iters: 20,
            warm_start: true,
            log_domain: LogDomain::Auto,
            init_bias: 1e-6,
        }
    }
}

impl GwConfig {
    pub fn validate(&self) -> Result<(), GwError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GwError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.sinkhorn_iters == 0 || self.projection_iters == 0 {
            return Err(GwError::Config("iteration counts must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.init_bias) {
            return Err(GwError::Config(format!("init_bias must lie in [0, 1), got {}", self.init_bias)));
        }
        Ok(())
    }
}

/// An `m×m` coupling with marginals `1/m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Tensor,
}

impl TransportPlan {
    pub fn m(&self) -> usize {
        self.plan.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan.get(i, j)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.m()).map(|i| self.plan.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let m = self.m();
        (0..m).map(|j| (0..m).map(|i| self.plan.get(i, j)).sum()).collect()
    }

    /// Largest deviation of any row or column sum from `1/m`.
    pub fn marginal_residual(&self) -> f64 {
        let target = 1.0 / self.m() as f64;
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .fold(0.0, |r, s| r.max((s - target).abs()))
    }

    pub fn transpose(&self) -> TransportPlan {
        TransportPlan { plan: self.plan.transpose().expect("square") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GwSolution {
    pub value: f64,
    pub plan: TransportPlan,
    /// Objective after each outer projection.
    pub history: Vec<f64>,
    pub log_domain: bool,
}

/// `C_ij = Σ_c |z_i[c] - z_j[c]|`.
pub fn pairwise_l1(z: &Tensor) -> Tensor {
    cross_l1(z, z)
}

/// `C_ij = ‖a_i - b_j‖₁` between two batches of equal width.
pub fn cross_l1(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let d: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y).abs()).sum();
            out.set(i, j, d);
        }
    }
    out
}

/// Plain Sinkhorn from `b = 1`: returns `(1/m)·diag(a) K diag(b)`.
pub fn sinkhorn(k: &Tensor, iters: usize) -> Result<TransportPlan, GwError> {
    let m = square(k)?;
    if (0..m).any(|i| k.row(i).iter().all(|&v| v <= 0.0)) || (0..m).any(|j| (0..m).all(|i| k.get(i, j) <= 0.0)) {
        return Err(GwError::KernelUnderflow { epsilon: None });
    }
    let mut b = vec![1.0; m];
    let a = scale_loop(k, &mut b, iters).ok_or(GwError::KernelUnderflow { epsilon: None })?;
    Ok(TransportPlan { plan: assemble(k, &a, &b) })
}

fn square(k: &Tensor) -> Result<usize, GwError> {
    match k.shape() {
        [r, c] if r == c && *r > 0 => Ok(*r),
        _ => Err(GwError::KernelShape),
    }
}

/// Run `iters` alternating scalings; returns `a` with `b` updated in place.
fn scale_loop(k: &Tensor, b: &mut [f64], iters: usize) -> Option<Vec<f64>> {
    let m = b.len();
    let mut a = vec![0.0; m];
    for _ in 0..iters {
        for (i, ai) in a.iter_mut().enumerate() {
            let kb: f64 = k.row(i).iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            *ai = 1.0 / kb;
        }
        for (j, bj) in b.iter_mut().enumerate() {
            let ka: f64 = (0..m).map(|i| k.get(i, j) * a[i]).sum();
            *bj = 1.0 / ka;
        }
    }
    (a.iter().chain(b.iter()).all(|v| v.is_finite() && *v > 0.0)).then_some(a)
}

fn assemble(k: &Tensor, a: &[f64], b: &[f64]) -> Tensor {
    let m = a.len();
    let mut p = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in 0..m {
            p.set(i, j, a[i] * k.get(i, j) * b[j] / m as f64);
        }
    }
    p
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on `log K`; `g = log b` is updated in place.
fn log_scale_loop(lk: &Tensor, g: &mut [f64], iters: usize) -> Vec<f64> {
    let m = g.len();
    let mut f = vec![0.0; m];
    for _ in 0..iters {
        for (i, fi) in f.iter_mut().enumerate() {
            let row = lk.row(i);
            *fi = -logsumexp((0..m).map(|j| row[j] + g[j]));
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = -logsumexp((0..m).map(|i| lk.get(i, j) + f[i]));
        }
    }
    f
}

/// `Σ_ijkl (C_ik - D_jl)² π_ij π_kl` for a plan of total mass 1.
pub fn gw_objective(c: &Tensor, d: &Tensor, plan: &Tensor) -> f64 {
    let m = plan.rows();
    let p: Vec<f64> = (0..m).map(|i| plan.row(i).iter().sum()).collect();
    let q: Vec<f64> = (0..m).map(|j| (0..m).map(|i| plan.get(i, j)).sum()).collect();
    let c2: f64 = (0..m).map(|i| (0..m).map(|k| c.get(i, k).powi(2) * p[i] * p[k]).sum::<f64>()).sum();
    let d2: f64 = (0..m).map(|j| (0..m).map(|l| d.get(j, l).powi(2) * q[j] * q[l]).sum::<f64>()).sum();
    let cpd = c.matmul(plan).and_then(|x| x.matmul(&d.transpose()?)).expect("square");
    let cross: f64 = plan.data().iter().zip(cpd.data()).map(|(a, b)| a * b).sum();
    c2 + d2 - 2.0 * cross
}

fn check_batches(zx: &Tensor, zy: &Tensor) -> Result<usize, GwError> {
    let (mx, my) = (zx.rows(), zy.rows());
    if mx != my {
        return Err(GwError::BatchMismatch(mx, my));
    }
    if mx == 0 {
        return Err(GwError::Empty);
    }
    if !zx.is_finite() || !zy.is_finite() {
        return Err(GwError::NonFinite);
    }
    Ok(mx)
}

/// Entropic GW between two embedding batches (`m×d_x`, `m×d_y`).
pub fn entropic_gw(zx: &Tensor, zy: &Tensor, cfg: &GwConfig) -> Result<GwSolution, GwError> {
    check_batches(zx, zy)?;
    solve_costs(&pairwise_l1(zx), &pairwise_l1(zy), cfg)
}

/// Experimental four-batch form: `C` compares `zx` with `zx2` and `D`
/// compares `zy` with `zy2`.
pub fn entropic_gw_cross(zx: &Tensor, zx2: &Tensor, zy: &Tensor, zy2: &Tensor, cfg: &GwConfig) -> Result<GwSolution, GwError> {
    let m = check_batches(zx, zy)?;
    check_batches(zx2, zy2)?;
    if zx2.rows() != m {
        return Err(GwError::BatchMismatch(m, zx2.rows()));
    }
    if zx.cols() != zx2.cols() || zy.cols() != zy2.cols() {
        return Err(GwError::Config("paired batches must share their embedding width".into()));
    }
    solve_costs(&cross_l1(zx, zx2), &cross_l1(zy, zy2), cfg)
}

/// Solve from precomputed cost matrices.
pub fn solve_costs(c: &Tensor, d: &Tensor, cfg: &GwConfig) -> Result<GwSolution, GwError> {
    cfg.validate()?;
    let m = square(c)?;
    if square(d)? != m {
        return Err(GwError::BatchMismatch(m, d.rows()));
    }
    if orient_less(d, c) {
        let mut s = solve_oriented(d, c, cfg)?;
        s.plan = s.plan.transpose();
        return Ok(s);
    }
    solve_oriented(c, d, cfg)
}

/// Orientation order: sorted entries first, so relabelling a batch cannot
/// flip the choice, then raw row-major order.
fn orient_less(a: &Tensor, b: &Tensor) -> bool {
    let sorted = |t: &Tensor| {
        let mut v = t.data().to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    match lex_cmp(&sorted(a), &sorted(b)) {
        std::cmp::Ordering::Equal => lex_cmp(a.data(), b.data()).is_lt(),
        o => o.is_lt(),
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

fn solve_oriented(c: &Tensor, d: &Tensor, cfg: &GwConfig) -> Result<GwSolution, GwError> {
    let m = c.rows();
    let mf = m as f64;
    let eps = cfg.epsilon;
    let mut plan = Tensor::full(&[m, m], 1.0 / (mf * mf));
    for i in 0..m {
        for j in 0..m {
            let delta = if i == j { 1.0 } else { 0.0 };
            plan.set(i, j, plan.get(i, j) + cfg.init_bias * (delta - 1.0 / mf) / mf);
        }
    }
    let c2_rows: Vec<f64> = (0..m).map(|i| c.row(i).iter().map(|v| v * v).sum::<f64>() / mf).collect();
    let d2_rows: Vec<f64> = (0..m).map(|j| d.row(j).iter().map(|v| v * v).sum::<f64>() / mf).collect();
    let dt = d.transpose().expect("square");

    let mut log_b = vec![0.0; m];
    let mut history = Vec::with_capacity(cfg.projection_iters);
    let mut used_log = false;
    for _ in 0..cfg.projection_iters {
        let cross = c.matmul(&plan).and_then(|x| x.matmul(&dt)).expect("square");
        let mut lk = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                let e = c2_rows[i] + d2_rows[j] - 2.0 * mf * cross.get(i, j);
                lk.set(i, j, -e / eps);
            }
        }
        if !cfg.warm_start {
            log_b.iter_mut().for_each(|v| *v = 0.0);
        }
        let out_of_range = lk.data().iter().any(|&v| !(LOG_FLOOR..=700.0).contains(&v));
        let log_mode = match cfg.log_domain {
            LogDomain::Always => true,
            LogDomain::Never => false,
            LogDomain::Auto => eps < 0.05 || out_of_range,
        };
        if log_mode {
            used_log = true;
            let f = log_scale_loop(&lk, &mut log_b, cfg.sinkhorn_iters);
            for i in 0..m {
                for j in 0..m {
                    plan.set(i, j, (f[i] + lk.get(i, j) + log_b[j]).exp() / mf);
                }
            }
        } else {
            let k = lk.map(|v| v.exp().max(KERNEL_FLOOR));
            let mut b: Vec<f64> = log_b.iter().map(|v| v.exp()).collect();
            let a = scale_loop(&k, &mut b, cfg.sinkhorn_iters).ok_or(GwError::KernelUnderflow { epsilon: Some(eps) })?;
            plan = assemble(&k, &a, &b);
            log_b = b.iter().map(|v| v.ln()).collect();
        }
        if !plan.is_finite() || (0..m).any(|i| plan.row(i).iter().all(|&v| v == 0.0)) {
            return Err(GwError::KernelUnderflow { epsilon: Some(eps) });
        }
        history.push(gw_objective(c, d, &plan));
    }
    Ok(GwSolution {
        value: *history.last().expect("at least one projection"),
        plan: TransportPlan { plan },
        history,
        log_domain: used_log,
    })
}

/// `∂/∂C_ik` of the objective with the plan held fixed:
/// `2 [C_ik p_i p_k - (π D πᵀ)_ik]`.
fn cost_gradient(c: &Tensor, d: &Tensor, plan: &Tensor) -> Tensor {
    let m = plan.rows();
    let p: Vec<f64> = (0..m).map(|i| plan.row(i).iter().sum()).collect();
    let pdp = plan.matmul(d).and_then(|x| x.matmul(&plan.transpose()?)).expect("square");
    let mut g = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for k in 0..m {
            g.set(i, k, 2.0 * (c.get(i, k) * p[i] * p[k] - pdp.get(i, k)));
        }
    }
    g
}

/// Chain a cost-matrix gradient through `C_ik = ‖z_i - z_k‖₁`, with
/// `sign(0) = 0`.
fn chain_l1(z: &Tensor, g: &Tensor) -> Tensor {
    let (m, dim) = (z.rows(), z.cols());
    let mut out = Tensor::zeros(&[m, dim]);
    for i in 0..m {
        for k in 0..m {
            let w = g.get(i, k) + g.get(k, i);
            if w == 0.0 {
                continue;
            }
            for ch in 0..dim {
                let diff = z.get(i, ch) - z.get(k, ch);
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                out.set(i, ch, out.get(i, ch) + w * s);
            }
        }
    }
    out
}

/// Envelope gradient of the GW objective with respect to `zx`, holding the
/// plan fixed.
pub fn gw_gradient(zx: &Tensor, zy: &Tensor, plan: &TransportPlan) -> Tensor {
    let c = pairwise_l1(zx);
    let d = pairwise_l1(zy);
    chain_l1(zx, &cost_gradient(&c, &d, &plan.plan))
}

/// Envelope gradient with respect to `zy`.
pub fn gw_gradient_y(zx: &Tensor, zy: &Tensor, plan: &TransportPlan) -> Tensor {
    let c = pairwise_l1(zx);
    let d = pairwise_l1(zy);
    let pt = plan.plan.transpose().expect("square");
    chain_l1(zy, &cost_gradient(&d, &c, &pt))
}

/// Objective of a fixed plan on raw embeddings.
pub fn fixed_plan_objective(zx: &Tensor, zy: &Tensor, plan: &TransportPlan) -> f64 {
    gw_objective(&pairwise_l1(zx), &pairwise_l1(zy), &plan.plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn l1_hand_values() {
        assert_eq!(pairwise_l1(&t(&[&[4.0, 2.0]])).data(), &[0.0]);
        let c = pairwise_l1(&t(&[&[0.0, 0.0], &[1.0, 2.0]]));
        assert_eq!(c.data(), &[0.0, 3.0, 3.0, 0.0]);
    }

    #[test]
    fn all_ones_kernel() {
        let p = sinkhorn(&Tensor::full(&[2, 2], 1.0), 30).unwrap();
        assert_eq!(p.plan.data(), &[0.25; 4]);
        assert_eq!(p.row_sums(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_row_is_underflow() {
        let k = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(sinkhorn(&k, 5), Err(GwError::KernelUnderflow { .. })));
    }

    #[test]
    fn single_point() {
        let s = entropic_gw(&t(&[&[3.0, 1.0]]), &t(&[&[-7.0]]), &GwConfig::default()).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.plan.plan.data(), &[1.0]);
    }

    #[test]
    fn two_point_isometry() {
        let zx = t(&[&[0.0], &[1.0]]);
        let zy = t(&[&[5.0, 0.0], &[5.0, 1.0]]);
        let s = entropic_gw(&zx, &zy, &GwConfig::default()).unwrap();
        assert!(s.value < 1e-3, "value {}", s.value);
    }

    #[test]
    fn errors() {
        let cfg = GwConfig::default();
        assert_eq!(entropic_gw(&Tensor::zeros(&[2, 1]), &Tensor::zeros(&[3, 1]), &cfg).unwrap_err(), GwError::BatchMismatch(2, 3));
        let nan = Tensor::matrix(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert_eq!(entropic_gw(&nan, &Tensor::zeros(&[2, 1]), &cfg).unwrap_err(), GwError::NonFinite);
        let bad = GwConfig { epsilon: 0.0, ..GwConfig::default() };
        assert!(matches!(entropic_gw(&Tensor::zeros(&[2, 1]), &Tensor::zeros(&[2, 1]), &bad), Err(GwError::Config(_))));
    }

    #[test]
    fn log_domain_agrees_when_both_apply() {
        let zx = t(&[&[0.0, 0.1], &[0.3, -0.2], &[0.5, 0.4]]);
        let zy = t(&[&[0.2], &[0.9], &[-0.1]]);
        let a = entropic_gw(&zx, &zy, &GwConfig { log_domain: LogDomain::Never, ..Default::default() }).unwrap();
        let b = entropic_gw(&zx, &zy, &GwConfig { log_domain: LogDomain::Always, ..Default::default() }).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
        assert!(b.log_domain && !a.log_domain);
    }

    #[test]
    fn cross_variant_runs() {
        let zx = t(&[&[0.0], &[1.0], &[2.5]]);
        let zy = t(&[&[0.0, 1.0], &[1.0, 1.0], &[2.0, 0.5]]);
        let s = entropic_gw_cross(&zx, &zx, &zy, &zy, &GwConfig::default()).unwrap();
        let r = entropic_gw(&zx, &zy, &GwConfig::default()).unwrap();
        assert_eq!(s.value, r.value);
    }
}

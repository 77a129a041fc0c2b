//! Dense f64 tensors, a reverse-mode tape and the Adam optimizer.
//!
//! Storage is row-major and may have any rank, but every differentiable
//! primitive works on rank-2 tensors. Scalars are `1×1`.

mod adam;
mod tape;

pub use adam::{Adam, AdamConfig, LrSchedule, ParamSet};
pub use tape::{Axis, Gradients, Tape, Unary, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric instability: {op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tape already consumed by an earlier backward pass")]
    StaleTape,
    #[error("non-finite gradient for parameter `{name}`; step rejected")]
    NonFiniteGradient { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v], requires_grad: false }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(op, format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Rows of a rank-2 tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), requires_grad: false })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, m) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}×{k} times {k2}×{m}")));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Elementwise binary op with rank-2 broadcasting: each extent must match
    /// or be 1.
    pub fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ar, ac) = self.dims2(op)?;
        let (br, bc) = other.dims2(op)?;
        let r = broadcast_dim(ar, br).ok_or_else(|| {
            shape_err(op, format!("cannot broadcast {ar}×{ac} with {br}×{bc}"))
        })?;
        let c = broadcast_dim(ac, bc).ok_or_else(|| {
            shape_err(op, format!("cannot broadcast {ar}×{ac} with {br}×{bc}"))
        })?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let ai = if ar == 1 { 0 } else { i };
            let bi = if br == 1 { 0 } else { i };
            for j in 0..c {
                let a = self.data[ai * ac + if ac == 1 { 0 } else { j }];
                let b = other.data[bi * bc + if bc == 1 { 0 } else { j }];
                out.push(f(a, b));
            }
        }
        Tensor::matrix(r, c, out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum a broadcast gradient back down to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2("reduce_to")?;
        let (tr, tc) = match shape {
            [a, b] => (*a, *b),
            _ => return Err(shape_err("reduce_to", "target must be rank 2")),
        };
        if (tr, tc) == (r, c) {
            return Ok(self.clone());
        }
        if (tr != r && tr != 1) || (tc != c && tc != 1) {
            return Err(shape_err("reduce_to", format!("{r}×{c} onto {tr}×{tc}")));
        }
        let mut out = vec![0.0; tr * tc];
        for i in 0..r {
            for j in 0..c {
                let oi = if tr == 1 { 0 } else { i };
                let oj = if tc == 1 { 0 } else { j };
                out[oi * tc + oj] += self.data[i * c + j];
            }
        }
        Tensor::matrix(tr, tc, out)
    }

    /// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked to
    /// exactly zero.
    pub fn softmax_rows(&self, causal: bool) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &self.data[i * c..i * c + width];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + width];
            let mut s = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        Tensor::matrix(r, c, out)
    }

    /// Row-wise standardization without affine parameters. Returns the output
    /// and each row's inverse standard deviation.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<(Tensor, Vec<f64>)> {
        let (r, c) = self.dims2("layer_norm")?;
        let mut out = vec![0.0; r * c];
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv.push(is);
        }
        Ok((Tensor::matrix(r, c, out)?, inv))
    }

    pub fn sum_axis(&self, axis: Axis) -> Result<Tensor> {
        let (r, c) = self.dims2("sum")?;
        match axis {
            Axis::Rows => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(self.row(i)) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, c, out)
            }
            Axis::Cols => Tensor::matrix(r, 1, (0..r).map(|i| self.row(i).iter().sum()).collect()),
            Axis::All => Ok(Tensor::scalar(self.sum())),
        }
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > extent {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {r}×{c}"),
            ));
        }
        if axis == 0 {
            Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&self.data[i * c + start..i * c + end]);
            }
            Tensor::matrix(r, w, out)
        }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let (r0, c0) = first.dims2("concat")?;
        if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let (r, c) = p.dims2("concat")?;
                if c != c0 {
                    return Err(shape_err("concat", format!("column counts {c0} and {c}")));
                }
                rows += r;
                data.extend_from_slice(&p.data);
            }
            Tensor::matrix(rows, c0, data)
        } else if axis == 1 {
            let mut cols = 0;
            for p in parts {
                let (r, c) = p.dims2("concat")?;
                if r != r0 {
                    return Err(shape_err("concat", format!("row counts {r0} and {r}")));
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::matrix(r0, cols, data)
        } else {
            Err(shape_err("concat", format!("axis {axis}")))
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

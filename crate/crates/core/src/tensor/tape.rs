//! Reverse-mode tape over rank-2 tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::{shape_err, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse axis 0, giving `1×c`.
    Rows,
    /// Collapse axis 1, giving `r×1`.
    Cols,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Abs,
    Square,
    Sqrt,
    Recip,
    Exp,
    Ln,
    Relu,
    Gelu,
    Tanh,
    /// `acos(x)²` with `x` clamped to `[-1, 1]`.
    AcosSquared,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Recip => "recip",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Tanh => "tanh",
            Unary::AcosSquared => "acos_squared",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Tanh => x.tanh(),
            Unary::AcosSquared => {
                let a = x.clamp(-1.0, 1.0).acos();
                a * a
            }
        }
    }

    /// Derivative at input `x` with output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::AcosSquared => {
                if x >= 1.0 {
                    // limit of -2 acos(x)/sqrt(1-x²) as x -> 1
                    -2.0
                } else {
                    let c = x.max(-1.0);
                    let s = (1.0 - c * c).max(1e-8).sqrt();
                    -2.0 * c.acos() / s
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor { requires_grad: false, ..value };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf. It is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.dims2("leaf")?;
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg, "leaf")
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Tensor { requires_grad: false, ..t })
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg, "scale")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let v = self.value(a).map(|x| f.eval(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Unary(a, f), rg, f.name())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows(false)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg, "softmax")
    }

    /// Row softmax with entries above the diagonal forced to zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows(true)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg, "softmax")
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (v, inv) = self.value(a).layer_norm_rows(LN_EPS)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm(a, inv), rg, "layer_norm")
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let v = self.value(a).sum_axis(axis)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.value(a).dims2("mean")?;
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
            Axis::All => r * c,
        };
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let v = Tensor::concat(&parts, axis)?;
        let rg = self.rg(xs);
        self.push(v, Op::Concat(xs.to_vec(), axis), rg, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice(axis, start, end)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Slice { x, axis, start }, rg, "slice")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Transpose(x), rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x).reshape(&[rows, cols])?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg, "reshape")
    }

    /// Backpropagate `seed` from `out`. The tape may be swept only once.
    pub fn backward(&mut self, out: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(out).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor { requires_grad: false, ..seed });
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&mut self, out: Var) -> Result<Gradients> {
        let shape = self.value(out).shape().to_vec();
        self.backward(out, Tensor::full(&shape, 1.0))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, d: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.data_mut().iter_mut().zip(d.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.matmul(&bv.transpose()?)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.transpose()?.matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.reduce_to(self.value(*a).shape())?)?;
                acc(*b, g.reduce_to(self.value(*b).shape())?)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.mul(bv)?.reduce_to(av.shape())?)?;
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, g.mul(av)?.reduce_to(bv.shape())?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let y = &node.value;
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gi, (&xi, &yi))| gi * f.deriv(xi, yi))
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d)?)?;
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (r, c) = y.dims2("softmax")?;
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[row * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::matrix(r, c, d)?)?;
            }
            Op::LayerNorm(a, inv) => {
                let y = &node.value;
                let (r, c) = y.dims2("layer_norm")?;
                let n = c as f64;
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    let yr = y.row(row);
                    let gr = g.row(row);
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        d[row * c + j] = inv[row] / n * (n * gr[j] - sg - yr[j] * sgy);
                    }
                }
                acc(*a, Tensor::matrix(r, c, d)?)?;
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::zeros(&shape).add(g)?)?;
            }
            Op::Concat(xs, axis) => {
                let mut off = 0;
                for x in xs {
                    let (r, c) = self.value(*x).dims2("concat")?;
                    let ext = if *axis == 0 { r } else { c };
                    if self.nodes[x.0].requires_grad {
                        acc(*x, g.slice(*axis, off, off + ext)?)?;
                    }
                    off += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = self.value(*x);
                let (r, c) = src.dims2("slice")?;
                let (gr, gc) = g.dims2("slice")?;
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                        d.set(si, sj, g.get(i, j));
                    }
                }
                acc(*x, d)?;
            }
            Op::Transpose(x) => acc(*x, g.transpose()?)?,
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.reshape(&shape)?)?;
            }
        }
        Ok(())
    }
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

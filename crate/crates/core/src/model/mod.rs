//! Transformer generators for both directions.
//!
//! Each generator is a pre-norm encoder/decoder pair. The encoder attends
//! over the full input; the decoder uses causal self-attention and full
//! cross-attention to the encoder context. Positions are added as fixed
//! sinusoids. A sequence embedding is the time-mean of the final encoder
//! layer.
//!
//! The same forward pass exists twice: on a [`Tape`] for training and
//! teacher forcing, and as an incremental decoder with cached keys and
//! values for generation. Both use the same tensor kernels in the same order,
//! so a generated frame equals the teacher-forced output on the generated
//! prefix bit for bit.

mod checkpoint;
mod infer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
pub use infer::{project_dance, project_dance_frame, random_start, DecodeMode, DecodeTrace, IncrementalDecoder};
pub use train::{batch_gw, cycle_losses, reconstruction_losses, Batch, StepGradients, StepReport, TrainConfig, TrainError, Trainer};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DANCE_CHANNELS, MUSIC_CHANNELS, SYMBOLIC_CHANNELS};
use crate::rng::{self, Rng};
use crate::rotations::Rotation6D;
use crate::skeleton::NUM_JOINTS;
use crate::tensor::{Axis, ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input has {got} channels, generator expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("start token has {got} values, generator emits {expected}")]
    StartToken { expected: usize, got: usize },
    #[error("cannot decode zero frames")]
    EmptyDecode,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("generated frame {frame} has a degenerate rotation at joint {joint}")]
    Degenerate { frame: usize, joint: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    MusicToDance,
    DanceToMusic,
}

impl Direction {
    pub fn input_dim(self) -> usize {
        match self {
            Direction::MusicToDance => MUSIC_CHANNELS,
            Direction::DanceToMusic => DANCE_CHANNELS,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            Direction::MusicToDance => DANCE_CHANNELS,
            Direction::DanceToMusic => SYMBOLIC_CHANNELS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::MusicToDance => "music-to-dance",
            Direction::DanceToMusic => "dance-to-music",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "music-to-dance" | "m2d" => Ok(Direction::MusicToDance),
            "dance-to-music" | "d2m" => Ok(Direction::DanceToMusic),
            _ => Err(format!("unknown direction `{s}` (music-to-dance, dance-to-music)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig { d_model: 32, heads: 4, layers: 2, d_ff: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ff {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ff: Ff,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecLayer {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ff: Ff,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc_in_w: usize,
    enc_in_b: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec_in_w: usize,
    dec_in_b: usize,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    out_w: usize,
    out_b: usize,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Values(Vec<f64>),
}

impl Layout {
    fn build(dir: Direction, cfg: &ModelConfig, p: &mut dyn FnMut(String, [usize; 2], Init) -> Result<usize>) -> Result<Layout> {
        let d = cfg.d_model;
        let (din, dout) = (dir.input_dim(), dir.output_dim());
        let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let ln = |p: &mut dyn FnMut(String, [usize; 2], Init) -> Result<usize>, name: &str| -> Result<Ln> {
            Ok(Ln { g: p(format!("{name}.g"), [1, d], Init::Ones)?, b: p(format!("{name}.b"), [1, d], Init::Zeros)? })
        };
        let attn = |p: &mut dyn FnMut(String, [usize; 2], Init) -> Result<usize>, name: &str| -> Result<Attn> {
            Ok(Attn {
                wq: p(format!("{name}.wq"), [d, d], w(d))?,
                wk: p(format!("{name}.wk"), [d, d], w(d))?,
                wv: p(format!("{name}.wv"), [d, d], w(d))?,
                wo: p(format!("{name}.wo"), [d, d], w(d))?,
                bo: p(format!("{name}.bo"), [1, d], Init::Zeros)?,
            })
        };
        let ff = |p: &mut dyn FnMut(String, [usize; 2], Init) -> Result<usize>, name: &str| -> Result<Ff> {
            Ok(Ff {
                w1: p(format!("{name}.w1"), [d, cfg.d_ff], w(d))?,
                b1: p(format!("{name}.b1"), [1, cfg.d_ff], Init::Zeros)?,
                w2: p(format!("{name}.w2"), [cfg.d_ff, d], w(cfg.d_ff))?,
                b2: p(format!("{name}.b2"), [1, d], Init::Zeros)?,
            })
        };

        let enc_in_w = p("enc.in.w".into(), [din, d], w(din))?;
        let enc_in_b = p("enc.in.b".into(), [1, d], Init::Zeros)?;
        let mut enc = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("enc.{l}");
            enc.push(EncLayer {
                ln1: ln(p, &format!("{name}.ln1"))?,
                attn: attn(p, &format!("{name}.attn"))?,
                ln2: ln(p, &format!("{name}.ln2"))?,
                ff: ff(p, &format!("{name}.ff"))?,
            });
        }
        let enc_ln = ln(p, "enc.ln")?;
        let dec_in_w = p("dec.in.w".into(), [dout, d], w(dout))?;
        let dec_in_b = p("dec.in.b".into(), [1, d], Init::Zeros)?;
        let mut dec = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("dec.{l}");
            dec.push(DecLayer {
                ln1: ln(p, &format!("{name}.ln1"))?,
                self_attn: attn(p, &format!("{name}.self"))?,
                ln2: ln(p, &format!("{name}.ln2"))?,
                cross: attn(p, &format!("{name}.cross"))?,
                ln3: ln(p, &format!("{name}.ln3"))?,
                ff: ff(p, &format!("{name}.ff"))?,
            });
        }
        let dec_ln = ln(p, "dec.ln")?;
        let out_w = p("dec.out.w".into(), [d, dout], Init::Normal(0.1 / (d as f64).sqrt()))?;
        let out_b = p("dec.out.b".into(), [1, dout], Init::Values(head_bias(dir)))?;
        Ok(Layout { enc_in_w, enc_in_b, enc, enc_ln, dec_in_w, dec_in_b, dec, dec_ln, out_w, out_b })
    }
}

/// Dance heads start at the rest pose (identity rotations); music heads at 0.
fn head_bias(dir: Direction) -> Vec<f64> {
    match dir {
        Direction::MusicToDance => {
            let mut b = vec![0.0; DANCE_CHANNELS];
            for j in 0..NUM_JOINTS {
                b[3 + 6 * j..3 + 6 * j + 6].copy_from_slice(&Rotation6D::IDENTITY.0);
            }
            b
        }
        Direction::DanceToMusic => vec![0.0; SYMBOLIC_CHANNELS],
    }
}

/// Sinusoidal encoding of one position.
pub fn positional_row(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Positions `offset..offset + t` as a `t×d` matrix.
pub fn positional(t: usize, d: usize) -> Tensor {
    let data = (0..t).flat_map(|p| positional_row(p, d)).collect();
    Tensor::matrix(t, d, data).expect("sized")
}

/// One direction's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub direction: Direction,
    pub cfg: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl Generator {
    /// Fresh weights drawn from `rng`.
    pub fn new(direction: Direction, cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let layout = Layout::build(direction, &cfg, &mut |name, shape, init| {
            let n = shape[0] * shape[1];
            let data = match init {
                Init::Normal(s) => (0..n).map(|_| s * rng::normal(rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Values(v) => v,
            };
            Ok(params.push(name, Tensor::matrix(shape[0], shape[1], data)?))
        })?;
        Ok(Generator { direction, cfg, params, layout })
    }

    /// Wrap existing weights, checking every expected name and shape.
    pub fn from_params(direction: Direction, cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::build(direction, &cfg, &mut |name, shape, _| {
            let i = params.index_of(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if params.get(i).shape() != shape {
                return Err(ModelError::ParamShape { name, expected: shape.to_vec(), got: params.get(i).shape().to_vec() });
            }
            Ok(i)
        })?;
        Ok(Generator { direction, cfg, params, layout })
    }

    pub fn input_dim(&self) -> usize {
        self.direction.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.direction.output_dim()
    }

    /// Put every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(_, t)| {
                let t = t.clone();
                Ok(if trainable { tape.param(t)? } else { tape.constant(t)? })
            })
            .collect()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(ModelError::InputWidth { expected: self.input_dim(), got: cols });
        }
        Ok(())
    }

    /// Encoder context (`T×d`) for an input node.
    pub fn encode_graph(&self, tape: &mut Tape, p: &[Var], input: Var) -> Result<Var> {
        let (t, c) = tape.value(input).dims2("encode")?;
        self.check_input(c)?;
        let l = &self.layout;
        let x = tape.matmul(input, p[l.enc_in_w])?;
        let x = tape.add(x, p[l.enc_in_b])?;
        let pe = tape.constant(positional(t, self.cfg.d_model))?;
        let mut h = tape.add(x, pe)?;
        for layer in &l.enc {
            let a = ln_graph(tape, p, layer.ln1, h)?;
            let z = self.attention_graph(tape, p, layer.attn, a, a, false)?;
            h = tape.add(h, z)?;
            let f = ln_graph(tape, p, layer.ln2, h)?;
            let z = ff_graph(tape, p, layer.ff, f)?;
            h = tape.add(h, z)?;
        }
        ln_graph(tape, p, l.enc_ln, h)
    }

    /// Mean over time of a context node, `1×d`.
    pub fn embed_graph(&self, tape: &mut Tape, ctx: Var) -> Result<Var> {
        Ok(tape.mean(ctx, Axis::Rows)?)
    }

    /// Decoder outputs for a block of input tokens (`n×out`), causally masked.
    /// Row `i` is the prediction that follows token `i`.
    pub fn decode_graph(&self, tape: &mut Tape, p: &[Var], ctx: Var, tokens: Var) -> Result<Var> {
        let (n, c) = tape.value(tokens).dims2("decode")?;
        if c != self.output_dim() {
            return Err(ModelError::StartToken { expected: self.output_dim(), got: c });
        }
        if n == 0 {
            return Err(ModelError::EmptyDecode);
        }
        let l = &self.layout;
        let x = tape.matmul(tokens, p[l.dec_in_w])?;
        let x = tape.add(x, p[l.dec_in_b])?;
        let pe = tape.constant(positional(n, self.cfg.d_model))?;
        let mut h = tape.add(x, pe)?;
        for layer in &l.dec {
            let a = ln_graph(tape, p, layer.ln1, h)?;
            let z = self.attention_graph(tape, p, layer.self_attn, a, a, true)?;
            h = tape.add(h, z)?;
            let a = ln_graph(tape, p, layer.ln2, h)?;
            let z = self.attention_graph(tape, p, layer.cross, a, ctx, false)?;
            h = tape.add(h, z)?;
            let f = ln_graph(tape, p, layer.ln3, h)?;
            let z = ff_graph(tape, p, layer.ff, f)?;
            h = tape.add(h, z)?;
        }
        let o = ln_graph(tape, p, l.dec_ln, h)?;
        let o = tape.matmul(o, p[l.out_w])?;
        Ok(tape.add(o, p[l.out_b])?)
    }

    /// Teacher-forcing tokens: the start token followed by all targets but
    /// the last.
    pub fn shifted_tokens(&self, start: &[f64], targets: &Tensor) -> Result<Tensor> {
        if start.len() != self.output_dim() {
            return Err(ModelError::StartToken { expected: self.output_dim(), got: start.len() });
        }
        if targets.cols() != self.output_dim() {
            return Err(ModelError::StartToken { expected: self.output_dim(), got: targets.cols() });
        }
        let t = targets.rows();
        if t == 0 {
            return Err(ModelError::EmptyDecode);
        }
        let s = Tensor::matrix(1, start.len(), start.to_vec())?;
        let body = targets.slice(0, 0, t - 1)?;
        Ok(Tensor::concat(&[&s, &body], 0)?)
    }

    fn attention_graph(&self, tape: &mut Tape, p: &[Var], w: Attn, q_src: Var, kv_src: Var, causal: bool) -> Result<Var> {
        let vars = AttentionVars { wq: p[w.wq], wk: p[w.wk], wv: p[w.wv], wo: p[w.wo], bo: p[w.bo] };
        Ok(attention_graph(tape, vars, self.cfg.heads, q_src, kv_src, causal)?.0)
    }

    /// Attention probabilities of one head for inspection, computed on a
    /// plain input with this generator's first encoder layer weights.
    pub fn encoder_attention_weights(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(input.cols())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let l = &self.layout;
        let x = tape.matmul(x, p[l.enc_in_w])?;
        let x = tape.add(x, p[l.enc_in_b])?;
        let pe = tape.constant(positional(input.rows(), self.cfg.d_model))?;
        let h = tape.add(x, pe)?;
        let a = ln_graph(&mut tape, &p, l.enc[0].ln1, h)?;
        let w = l.enc[0].attn;
        let dh = self.cfg.head_dim();
        let q = self.params.get(w.wq);
        let k = self.params.get(w.wk);
        let av = tape.value(a).clone();
        let (qm, km) = (av.matmul(q)?, av.matmul(k)?);
        let mut out = Vec::new();
        for h in 0..self.cfg.heads {
            let qh = qm.slice(1, h * dh, (h + 1) * dh)?;
            let kh = km.slice(1, h * dh, (h + 1) * dh)?;
            let s = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
            out.push(s.softmax_rows(false)?);
        }
        Ok(out)
    }

    /// Encoder context and mean-pooled embedding for a plain input.
    pub fn encode(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let ctx = self.encode_graph(&mut tape, &p, x)?;
        let emb = self.embed_graph(&mut tape, ctx)?;
        Ok((tape.value(ctx).clone(), tape.value(emb).clone()))
    }

    /// Teacher-forced outputs for `targets` given `input`.
    pub fn teacher_forced(&self, input: &Tensor, start: &[f64], targets: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone())?;
        let ctx = self.encode_graph(&mut tape, &p, x)?;
        let toks = tape.constant(self.shifted_tokens(start, targets)?)?;
        let out = self.decode_graph(&mut tape, &p, ctx, toks)?;
        Ok(tape.value(out).clone())
    }

    /// Decoder outputs for explicit tokens on a fixed context.
    pub fn decode_tokens(&self, ctx: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let c = tape.constant(ctx.clone())?;
        let toks = tape.constant(tokens.clone())?;
        let out = self.decode_graph(&mut tape, &p, c, toks)?;
        Ok(tape.value(out).clone())
    }
}

/// Projection weights of one multi-head attention block: `wq`, `wk`, `wv`,
/// `wo` are `d×d`, `bo` is `1×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Clone, Copy)]
struct AttentionVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
}

/// Multi-head attention node plus each head's probability matrix.
fn attention_graph(
    tape: &mut Tape,
    w: AttentionVars,
    heads: usize,
    q_src: Var,
    kv_src: Var,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(w.wq).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ModelError::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(q_src, w.wq)?;
    let k = tape.matmul(kv_src, w.wk)?;
    let v = tape.matmul(kv_src, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale)?;
        let a = if causal { tape.causal_softmax(s)? } else { tape.softmax(s)? };
        probs.push(a);
        outs.push(tape.matmul(a, vh)?);
    }
    let z = tape.concat(&outs, 1)?;
    let o = tape.matmul(z, w.wo)?;
    Ok((tape.add(o, w.bo)?, probs))
}

/// Full (unmasked) self-attention of `s` (`T×d`). Returns the output and the
/// `T×T` probabilities of every head.
pub fn attention(s: &Tensor, w: &AttentionWeights, heads: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.constant(s.clone())?;
    let vars = AttentionVars {
        wq: tape.constant(w.wq.clone())?,
        wk: tape.constant(w.wk.clone())?,
        wv: tape.constant(w.wv.clone())?,
        wo: tape.constant(w.wo.clone())?,
        bo: tape.constant(w.bo.clone())?,
    };
    let (out, probs) = attention_graph(&mut tape, vars, heads, x, x, false)?;
    Ok((tape.value(out).clone(), probs.iter().map(|&p| tape.value(p).clone()).collect()))
}

fn ln_graph(tape: &mut Tape, p: &[Var], ln: Ln, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x)?;
    let y = tape.mul(y, p[ln.g])?;
    Ok(tape.add(y, p[ln.b])?)
}

fn ff_graph(tape: &mut Tape, p: &[Var], ff: Ff, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p[ff.w1])?;
    let h = tape.add(h, p[ff.b1])?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, p[ff.w2])?;
    Ok(tape.add(o, p[ff.b2])?)
}

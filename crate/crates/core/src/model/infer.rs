//! Numeric forward passes: incremental decoding with cached keys and values.
//!
//! Every step calls the same tensor kernels the tape uses, on the same rows in
//! the same order, so the cached path reproduces a full teacher-forced pass
//! over the generated tokens exactly.

use crate::features::{ChordQuality, ChordSeed, DANCE_CHANNELS};
use crate::rng::{self, Rng};
use crate::rotations::{axis_angle_to_matrix, from_sixd, to_sixd, Rotation6D, Vec3};
use crate::skeleton::NUM_JOINTS;
use crate::tensor::{Tensor, TensorError, Unary};

use super::{positional_row, Attn, Direction, Ff, Generator, Ln, ModelError, Result};

const LN_EPS: f64 = 1e-5;

/// How the decoder obtains its input tokens.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// One parallel pass over the start token and `targets[..T-1]`.
    TeacherForced(&'a Tensor),
    /// Feed each generated frame back as the next token.
    Autoregressive,
}

/// Raw head outputs and the tokens that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    /// `T×out` decoder outputs before any projection.
    pub raw: Tensor,
    /// `T×out` input tokens; row 0 is the start token.
    pub tokens: Tensor,
}

/// Replace every 6D block of a dance frame with its nearest valid rotation.
/// Degenerate blocks become the identity. Returns how many were replaced.
pub fn project_dance_frame(frame: &mut [f64]) -> usize {
    debug_assert_eq!(frame.len(), DANCE_CHANNELS);
    let mut bad = 0;
    for j in 0..NUM_JOINTS {
        let block = &mut frame[3 + 6 * j..9 + 6 * j];
        let six = match from_sixd(&Rotation6D::from_slice(block)) {
            Ok(m) => to_sixd(&m),
            Err(_) => {
                bad += 1;
                Rotation6D::IDENTITY
            }
        };
        block.copy_from_slice(&six.0);
    }
    bad
}

/// Projected copy of a `T×147` output matrix.
pub fn project_dance(raw: &Tensor) -> Tensor {
    let mut out = raw.clone();
    let mut bad = 0;
    for t in 0..out.rows() {
        bad += project_dance_frame(out.row_mut(t));
    }
    if bad > 0 {
        log::warn!("{bad} degenerate 6D blocks replaced by the identity");
    }
    out
}

/// A random inference start token: a jittered rest pose for dance, a random
/// chord for music.
pub fn random_start(direction: Direction, rng: &mut Rng) -> Vec<f64> {
    match direction {
        Direction::MusicToDance => {
            let mut v = vec![0.0; DANCE_CHANNELS];
            v[1] = 0.9;
            for j in 0..NUM_JOINTS {
                let aa = Vec3::new(rng::normal(rng), rng::normal(rng), rng::normal(rng)) * 0.2;
                v[3 + 6 * j..9 + 6 * j].copy_from_slice(&to_sixd(&axis_angle_to_matrix(aa)).0);
            }
            v
        }
        Direction::DanceToMusic => {
            let root = rng::below(rng, 12) as u8;
            let quality = if rng::below(rng, 2) == 0 { ChordQuality::Major } else { ChordQuality::Minor };
            ChordSeed::new(root, quality).start_token().to_vec()
        }
    }
}

struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    cross_k: Tensor,
    cross_v: Tensor,
}

/// Decoder state for one context.
pub struct IncrementalDecoder<'g> {
    g: &'g Generator,
    layers: Vec<LayerCache>,
    pos: usize,
}

fn check(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(ModelError::Tensor(TensorError::NonFinite { op }))
    }
}

impl<'g> IncrementalDecoder<'g> {
    pub fn new(g: &'g Generator, ctx: &Tensor) -> Result<Self> {
        let mut layers = Vec::with_capacity(g.layout.dec.len());
        for layer in &g.layout.dec {
            layers.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: ctx.matmul(g.params.get(layer.cross.wk))?,
                cross_v: ctx.matmul(g.params.get(layer.cross.wv))?,
            });
        }
        Ok(IncrementalDecoder { g, layers, pos: 0 })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn p(&self, i: usize) -> &Tensor {
        self.g.params.get(i)
    }

    fn ln(&self, ln: Ln, x: &Tensor) -> Result<Tensor> {
        let (y, _) = x.layer_norm_rows(LN_EPS)?;
        Ok(y.mul(self.p(ln.g))?.add(self.p(ln.b))?)
    }

    fn ff(&self, ff: Ff, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(self.p(ff.w1))?.add(self.p(ff.b1))?;
        let h = h.map(|v| Unary::Gelu.eval(v));
        Ok(h.matmul(self.p(ff.w2))?.add(self.p(ff.b2))?)
    }

    fn attend(&self, w: Attn, q_src: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let cfg = &self.g.cfg;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = q_src.matmul(self.p(w.wq))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, lo, hi)?;
            let kt = k.slice(1, lo, hi)?.transpose()?;
            let vh = v.slice(1, lo, hi)?;
            let a = qh.matmul(&kt)?.scale(scale).softmax_rows(false)?;
            heads.push(a.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        Ok(Tensor::concat(&refs, 1)?.matmul(self.p(w.wo))?.add(self.p(w.bo))?)
    }

    /// Consume one token and return the raw output for the next frame.
    pub fn step(&mut self, token: &[f64]) -> Result<Vec<f64>> {
        let g = self.g;
        if token.len() != g.output_dim() {
            return Err(ModelError::StartToken { expected: g.output_dim(), got: token.len() });
        }
        let d = g.cfg.d_model;
        let l = &g.layout;
        let x = check(Tensor::matrix(1, token.len(), token.to_vec())?, "decode")?;
        let pe = Tensor::matrix(1, d, positional_row(self.pos, d))?;
        let mut h = x.matmul(self.p(l.dec_in_w))?.add(self.p(l.dec_in_b))?.add(&pe)?;
        let n = self.pos + 1;
        for (i, layer) in l.dec.iter().enumerate() {
            let a = self.ln(layer.ln1, &h)?;
            let k_row = a.matmul(self.p(layer.self_attn.wk))?;
            let v_row = a.matmul(self.p(layer.self_attn.wv))?;
            self.layers[i].self_k.extend_from_slice(k_row.data());
            self.layers[i].self_v.extend_from_slice(v_row.data());
            let k = Tensor::matrix(n, d, self.layers[i].self_k.clone())?;
            let v = Tensor::matrix(n, d, self.layers[i].self_v.clone())?;
            let z = self.attend(layer.self_attn, &a, &k, &v)?;
            h = h.add(&z)?;
            let a = self.ln(layer.ln2, &h)?;
            let c = &self.layers[i];
            let z = self.attend(layer.cross, &a, &c.cross_k, &c.cross_v)?;
            h = h.add(&z)?;
            let f = self.ln(layer.ln3, &h)?;
            h = h.add(&self.ff(layer.ff, &f)?)?;
        }
        let o = self.ln(l.dec_ln, &h)?;
        let o = check(o.matmul(self.p(l.out_w))?.add(self.p(l.out_b))?, "decode")?;
        self.pos += 1;
        Ok(o.into_data())
    }
}

impl Generator {
    fn feedback(&self, raw: &[f64]) -> Vec<f64> {
        let mut tok = raw.to_vec();
        if self.direction == Direction::MusicToDance {
            project_dance_frame(&mut tok);
        }
        tok
    }

    /// Autoregressive decode recording raw outputs and fed tokens.
    pub fn decode_trace(&self, ctx: &Tensor, start: &[f64], len: usize) -> Result<DecodeTrace> {
        if len == 0 {
            return Err(ModelError::EmptyDecode);
        }
        if start.len() != self.output_dim() {
            return Err(ModelError::StartToken { expected: self.output_dim(), got: start.len() });
        }
        let out = self.output_dim();
        let mut dec = IncrementalDecoder::new(self, ctx)?;
        let mut raw = Vec::with_capacity(len * out);
        let mut tokens = Vec::with_capacity(len * out);
        let mut tok = start.to_vec();
        for _ in 0..len {
            tokens.extend_from_slice(&tok);
            let y = dec.step(&tok)?;
            tok = self.feedback(&y);
            raw.extend_from_slice(&y);
        }
        Ok(DecodeTrace { raw: Tensor::matrix(len, out, raw)?, tokens: Tensor::matrix(len, out, tokens)? })
    }

    /// Decode `len` frames from an encoder context. Dance output is projected
    /// onto valid rotations; music output is returned raw.
    pub fn decode(&self, ctx: &Tensor, start: &[f64], len: usize, mode: DecodeMode<'_>) -> Result<Tensor> {
        let raw = match mode {
            DecodeMode::TeacherForced(targets) => {
                if targets.rows() != len {
                    return Err(ModelError::Tensor(TensorError::Shape {
                        op: "decode",
                        detail: format!("{} targets for {len} frames", targets.rows()),
                    }));
                }
                let tokens = self.shifted_tokens(start, targets)?;
                self.decode_tokens(ctx, &tokens)?
            }
            DecodeMode::Autoregressive => self.decode_trace(ctx, start, len)?.raw,
        };
        Ok(self.finish(raw))
    }

    fn finish(&self, raw: Tensor) -> Tensor {
        match self.direction {
            Direction::MusicToDance => project_dance(&raw),
            Direction::DanceToMusic => raw,
        }
    }

    /// Generate one output frame per input frame.
    pub fn generate(&self, input: &Tensor, start: &[f64]) -> Result<Tensor> {
        self.check_input(input.cols())?;
        let (ctx, _) = self.encode(input)?;
        self.decode(&ctx, start, input.rows(), DecodeMode::Autoregressive)
    }

    /// Generate over consecutive windows of `chunk` input frames, handing the
    /// last generated frame of each window to the next as its start token.
    pub fn generate_chunked(&self, input: &Tensor, start: &[f64], chunk: usize) -> Result<Tensor> {
        if chunk == 0 || input.rows() == 0 {
            return Err(ModelError::EmptyDecode);
        }
        let mut parts = Vec::new();
        let mut tok = start.to_vec();
        let mut s = 0;
        while s < input.rows() {
            let e = (s + chunk).min(input.rows());
            let y = self.generate(&input.slice(0, s, e)?, &tok)?;
            tok = y.row(y.rows() - 1).to_vec();
            parts.push(y);
            s = e;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn setup(dir: Direction) -> (Generator, Tensor) {
        let g = Generator::new(dir, ModelConfig { d_model: 16, heads: 2, layers: 2, d_ff: 24 }, &mut rng::seeded(9)).unwrap();
        let mut r = rng::seeded(10);
        let x = Tensor::matrix(7, dir.input_dim(), (0..7 * dir.input_dim()).map(|_| rng::normal(&mut r)).collect()).unwrap();
        (g, x)
    }

    #[test]
    fn cached_decode_matches_full_pass_bitwise() {
        for dir in [Direction::MusicToDance, Direction::DanceToMusic] {
            let (g, x) = setup(dir);
            let (ctx, _) = g.encode(&x).unwrap();
            let start = random_start(dir, &mut rng::seeded(1));
            let tr = g.decode_trace(&ctx, &start, 7).unwrap();
            let full = g.decode_tokens(&ctx, &tr.tokens).unwrap();
            assert_eq!(full, tr.raw);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let (g, x) = setup(Direction::MusicToDance);
        let y = g.generate(&x, &random_start(g.direction, &mut rng::seeded(2))).unwrap();
        let again = project_dance(&y);
        for (a, b) in y.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_block_becomes_identity() {
        let mut f = vec![0.0; DANCE_CHANNELS];
        assert_eq!(project_dance_frame(&mut f), NUM_JOINTS);
        assert_eq!(&f[3..9], &Rotation6D::IDENTITY.0);
    }

    #[test]
    fn rejects_zero_length_and_bad_start() {
        let (g, x) = setup(Direction::DanceToMusic);
        let (ctx, _) = g.encode(&x).unwrap();
        assert!(matches!(g.decode_trace(&ctx, &[0.0; 13], 0), Err(ModelError::EmptyDecode)));
        assert!(matches!(g.decode_trace(&ctx, &[0.0; 12], 3), Err(ModelError::StartToken { .. })));
    }
}

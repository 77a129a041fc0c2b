//! Joint training of both generators.
//!
//! One step builds a single tape holding both generators. Loss routing:
//!
//! * dance reconstruction, dance cycle and GW update the music-to-dance model
//! * music reconstruction and music cycle update the dance-to-music model
//!
//! Cycle intermediates are generated autoregressively outside the tape and
//! enter the second stage as constants, so each cycle term reaches only the
//! generator that produces its final output. With `cycle_through_both` the
//! intermediate is re-evaluated on the tape in one parallel pass over the
//! generated tokens (identical values) and the gradient also reaches the
//! first-stage generator.
//!
//! The GW term enters as `Σ Zx ⊙ G` where `G` is the envelope gradient at the
//! solved plan, which gives the music encoder the exact GW gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{lift_symbolic, PairedDataset, Split, CHROMA, MUSIC_CHANNELS};
use crate::gw::{entropic_gw, gw_gradient, gw_gradient_y, GwConfig, GwError};
use crate::losses::{dance_loss, dance_metric_frames, music_loss, music_metric_symbolic, LossBreakdown, LossError, LossWeights, Reduction};
use crate::rng::{self, Rng};
use crate::tensor::{Adam, AdamConfig, Axis, LrSchedule, Tape, Tensor, TensorError, Var};

use super::{Direction, Generator, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("step {step}: non-finite value ({detail}); weights left unchanged")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gw(#[from] GwError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    fn is_non_finite(&self) -> bool {
        let nf = |e: &TensorError| matches!(e, TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. });
        match self {
            TrainError::Tensor(e) => nf(e),
            TrainError::Model(ModelError::Tensor(e)) => nf(e),
            TrainError::Loss(LossError::Tensor(e)) => nf(e),
            TrainError::Gw(GwError::NonFinite) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Crop length in frames.
    pub t: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub use_gw: bool,
    pub use_cycle: bool,
    /// Also push the GW gradient into the dance encoder.
    pub gw_both: bool,
    /// Let cycle gradients reach the first-stage generator.
    pub cycle_through_both: bool,
    /// Divide each embedding by its width before the GW costs, so the L1
    /// costs are per-channel averages.
    pub gw_normalize: bool,
    pub reduction: Reduction,
    pub adam: AdamConfig,
    pub gw: GwConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t: 24,
            batch_size: 4,
            weights: LossWeights::default(),
            use_gw: true,
            use_cycle: true,
            gw_both: false,
            cycle_through_both: false,
            gw_normalize: true,
            reduction: Reduction::Sum,
            adam: AdamConfig {
                schedule: LrSchedule { base: 1e-3, milestones: vec![(20_000, 1e-4), (40_000, 5e-5)] },
                ..AdamConfig::default()
            },
            gw: GwConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 2 {
            return Err(TrainError::Config(format!("t must be at least 2, got {}", self.t)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.use_gw && self.batch_size < 2 {
            return Err(TrainError::Config("GW needs batch_size >= 2".into()));
        }
        let w = &self.weights;
        for (name, v) in [
            ("dance_reconstruction", w.dance_reconstruction),
            ("music_reconstruction", w.music_reconstruction),
            ("dance_cycle", w.dance_cycle),
            ("music_cycle", w.music_cycle),
            ("gw", w.gw),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("weight {name} must be a finite non-negative number")));
            }
        }
        self.gw.validate()?;
        Ok(())
    }
}

/// Aligned crops: music `T×53`, dance `T×147`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub music: Vec<Tensor>,
    pub dance: Vec<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.music.len()
    }

    pub fn is_empty(&self) -> bool {
        self.music.is_empty()
    }

    /// Window `start..start + t` of every pair in a split.
    pub fn fixed(ds: &PairedDataset, split: Split, start: usize, t: usize) -> Result<Batch> {
        let pairs = ds.split(split);
        if pairs.is_empty() {
            return Err(TrainError::Data(format!("no {split:?} pairs")));
        }
        let mut b = Batch { music: Vec::new(), dance: Vec::new() };
        for p in pairs {
            if p.music.len() < start + t {
                return Err(TrainError::Data(format!("sequence of {} frames is shorter than {}", p.music.len(), start + t)));
            }
            b.music.push(p.music.full().slice(0, start, start + t)?);
            b.dance.push(p.dance.frames().slice(0, start, start + t)?);
        }
        Ok(b)
    }
}

fn symbolic(music: &Tensor) -> Result<Tensor> {
    Ok(music.slice(1, CHROMA.start, MUSIC_CHANNELS)?)
}

/// Gradients for both generators plus the loss values that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub music_to_dance: Vec<Tensor>,
    pub dance_to_music: Vec<Tensor>,
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub learning_rate: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub music_to_dance: Generator,
    pub dance_to_music: Generator,
    opt_md: Adam,
    opt_dm: Adam,
    data: Vec<(Tensor, Tensor)>,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
}

impl Trainer {
    /// Fresh generators from the `init` substream of `seed`, trained on the
    /// train split of `ds`.
    pub fn new(cfg: TrainConfig, md_cfg: ModelConfig, dm_cfg: ModelConfig, ds: &PairedDataset, seed: u64) -> Result<Self> {
        let mut init = rng::substream(seed, rng::stream::INIT);
        let md = Generator::new(Direction::MusicToDance, md_cfg, &mut init)?;
        let dm = Generator::new(Direction::DanceToMusic, dm_cfg, &mut init)?;
        Self::with_generators(cfg, md, dm, ds, seed)
    }

    pub fn with_generators(cfg: TrainConfig, md: Generator, dm: Generator, ds: &PairedDataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if md.direction != Direction::MusicToDance || dm.direction != Direction::DanceToMusic {
            return Err(TrainError::Config("generators passed in the wrong order".into()));
        }
        let data: Vec<(Tensor, Tensor)> = ds
            .split(Split::Train)
            .into_iter()
            .map(|p| (p.music.full(), p.dance.frames().clone()))
            .collect();
        if data.is_empty() {
            return Err(TrainError::Data("no training pairs".into()));
        }
        if let Some((m, _)) = data.iter().find(|(m, _)| m.rows() < cfg.t) {
            return Err(TrainError::Data(format!("training sequence of {} frames is shorter than t = {}", m.rows(), cfg.t)));
        }
        let opt_md = Adam::new(cfg.adam.clone(), &md.params);
        let opt_dm = Adam::new(cfg.adam.clone(), &dm.params);
        Ok(Trainer {
            cfg,
            music_to_dance: md,
            dance_to_music: dm,
            opt_md,
            opt_dm,
            data,
            rng: rng::substream(seed, rng::stream::BATCHES),
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Draw the next batch: epochs visit pairs in shuffled order, each
    /// cropped at a random offset.
    pub fn next_batch(&mut self) -> Batch {
        let mut b = Batch { music: Vec::new(), dance: Vec::new() };
        for _ in 0..self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                for i in (1..self.order.len()).rev() {
                    let j = rng::below(&mut self.rng, i + 1);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            let (m, d) = &self.data[self.order[self.cursor]];
            self.cursor += 1;
            let off = rng::below(&mut self.rng, m.rows() - self.cfg.t + 1);
            b.music.push(m.slice(0, off, off + self.cfg.t).expect("length checked"));
            b.dance.push(d.slice(0, off, off + self.cfg.t).expect("length checked"));
        }
        b
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch();
        self.step_on(&batch)
    }

    /// One optimizer step on `batch`. On error nothing is modified.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepReport> {
        let g = self.gradients(batch)?;
        let lr = self.opt_md.current_lr();
        self.opt_md.step(&mut self.music_to_dance.params, &g.music_to_dance)?;
        self.opt_dm.step(&mut self.dance_to_music.params, &g.dance_to_music)?;
        self.step += 1;
        Ok(StepReport { step: self.step, breakdown: g.breakdown, learning_rate: lr })
    }

    /// Loss values and gradients for `batch` without updating anything.
    pub fn gradients(&self, batch: &Batch) -> Result<StepGradients> {
        let step = self.step + 1;
        let out = forward_backward(&self.cfg, &self.music_to_dance, &self.dance_to_music, batch).map_err(|e| {
            if e.is_non_finite() {
                TrainError::NonFinite { step, detail: e.to_string() }
            } else {
                e
            }
        })?;
        if !out.breakdown.is_valid() {
            return Err(TrainError::NonFinite { step, detail: format!("{:?}", out.breakdown) });
        }
        let gens = [(&self.music_to_dance, &out.music_to_dance), (&self.dance_to_music, &out.dance_to_music)];
        for (gen, grads) in gens {
            for (i, g) in grads.iter().enumerate() {
                if !g.is_finite() {
                    return Err(TrainError::NonFinite { step, detail: format!("gradient of `{}`", gen.params.name(i)) });
                }
            }
        }
        Ok(out)
    }

    /// Loss values on `batch` with the current weights.
    pub fn evaluate(&self, batch: &Batch) -> Result<LossBreakdown> {
        Ok(self.gradients(batch)?.breakdown)
    }
}

fn reduce(tape: &mut Tape, terms: &[Var], red: Reduction) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    if red == Reduction::Mean {
        acc = tape.scale(acc, 1.0 / terms.len() as f64)?;
    }
    Ok(Some(acc))
}

fn forward_backward(cfg: &TrainConfig, md: &Generator, dm: &Generator, batch: &Batch) -> Result<StepGradients> {
    if batch.is_empty() || batch.music.len() != batch.dance.len() {
        return Err(TrainError::Data("empty or ragged batch".into()));
    }
    if cfg.use_gw && batch.len() < 2 {
        return Err(TrainError::Config("GW needs at least 2 pairs per batch".into()));
    }
    let mut tape = Tape::new();
    let pm = md.bind(&mut tape, true)?;
    let pd = dm.bind(&mut tape, true)?;
    let (mut rd, mut rm, mut cd, mut cm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut zx, mut zy) = (Vec::new(), Vec::new());

    for (x, y) in batch.music.iter().zip(&batch.dance) {
        let xs = symbolic(x)?;
        let t = x.rows();
        // music -> dance
        let xin = tape.constant(x.clone())?;
        let ctx_x = md.encode_graph(&mut tape, &pm, xin)?;
        zx.push(md.embed_graph(&mut tape, ctx_x)?);
        let tok = tape.constant(md.shifted_tokens(y.row(0), y)?)?;
        let out = md.decode_graph(&mut tape, &pm, ctx_x, tok)?;
        rd.push(dance_loss(&mut tape, out, y)?);
        // dance -> music
        let yin = tape.constant(y.clone())?;
        let ctx_y = dm.encode_graph(&mut tape, &pd, yin)?;
        zy.push(dm.embed_graph(&mut tape, ctx_y)?);
        let tok = tape.constant(dm.shifted_tokens(xs.row(0), &xs)?)?;
        let out = dm.decode_graph(&mut tape, &pd, ctx_y, tok)?;
        rm.push(music_loss(&mut tape, out, &xs)?);

        if cfg.use_cycle {
            // y -> music -> dance
            let trace = dm.decode_trace(tape.value(ctx_y), xs.row(0), t)?;
            let inter = if cfg.cycle_through_both {
                let tok = tape.constant(trace.tokens)?;
                let raw = dm.decode_graph(&mut tape, &pd, ctx_y, tok)?;
                let pad = tape.constant(Tensor::zeros(&[t, CHROMA.start]))?;
                tape.concat(&[pad, raw], 1)?
            } else {
                tape.constant(lift_symbolic(&trace.raw))?
            };
            let ctx = md.encode_graph(&mut tape, &pm, inter)?;
            let tok = tape.constant(md.shifted_tokens(y.row(0), y)?)?;
            let out = md.decode_graph(&mut tape, &pm, ctx, tok)?;
            cd.push(dance_loss(&mut tape, out, y)?);
            // x -> dance -> music
            let trace = md.decode_trace(tape.value(ctx_x), y.row(0), t)?;
            let inter = if cfg.cycle_through_both {
                let tok = tape.constant(trace.tokens)?;
                md.decode_graph(&mut tape, &pm, ctx_x, tok)?
            } else {
                tape.constant(trace.raw)?
            };
            let ctx = dm.encode_graph(&mut tape, &pd, inter)?;
            let tok = tape.constant(dm.shifted_tokens(xs.row(0), &xs)?)?;
            let out = dm.decode_graph(&mut tape, &pd, ctx, tok)?;
            cm.push(music_loss(&mut tape, out, &xs)?);
        }
    }

    let red = cfg.reduction;
    let w = &cfg.weights;
    let mut breakdown = LossBreakdown::default();
    let mut total: Vec<Var> = Vec::new();
    for (terms, weight, slot) in [
        (&rd, w.dance_reconstruction, &mut breakdown.dance_reconstruction),
        (&rm, w.music_reconstruction, &mut breakdown.music_reconstruction),
        (&cd, w.dance_cycle, &mut breakdown.dance_cycle),
        (&cm, w.music_cycle, &mut breakdown.music_cycle),
    ] {
        if let Some(v) = reduce(&mut tape, terms, red)? {
            *slot = tape.value(v).item();
            if weight != 0.0 {
                total.push(tape.scale(v, weight)?);
            }
        }
    }

    if cfg.use_gw {
        let zx = tape.concat(&zx, 0)?;
        let zy = tape.concat(&zy, 0)?;
        let (sx, sy) = gw_scales(cfg, md, dm);
        let zxv = tape.value(zx).scale(sx);
        let zyv = tape.value(zy).scale(sy);
        let sol = entropic_gw(&zxv, &zyv, &cfg.gw)?;
        breakdown.gw = sol.value;
        if w.gw != 0.0 {
            let mut sides = vec![(zx, gw_gradient(&zxv, &zyv, &sol.plan).scale(sx))];
            if cfg.gw_both {
                sides.push((zy, gw_gradient_y(&zxv, &zyv, &sol.plan).scale(sy)));
            }
            for (z, g) in sides {
                let g = tape.constant(g.scale(w.gw))?;
                let s = tape.mul(z, g)?;
                total.push(tape.sum(s, Axis::All)?);
            }
        }
    }
    let breakdown = breakdown.with_totals(w);

    let grads = match reduce(&mut tape, &total, Reduction::Sum)? {
        Some(loss) => {
            let g = tape.backward_scalar(loss)?;
            (pm.iter().map(|&v| g.wrt(v)).collect(), pd.iter().map(|&v| g.wrt(v)).collect())
        }
        None => (zero_grads(md), zero_grads(dm)),
    };
    Ok(StepGradients { breakdown, music_to_dance: grads.0, dance_to_music: grads.1 })
}

fn gw_scales(cfg: &TrainConfig, md: &Generator, dm: &Generator) -> (f64, f64) {
    if cfg.gw_normalize {
        (1.0 / md.cfg.d_model as f64, 1.0 / dm.cfg.d_model as f64)
    } else {
        (1.0, 1.0)
    }
}

/// GW value between the batch embeddings of both encoders, with the same
/// scaling the training step uses.
pub fn batch_gw(cfg: &TrainConfig, batch: &Batch, md: &Generator, dm: &Generator) -> std::result::Result<f64, TrainError> {
    let (sx, sy) = gw_scales(cfg, md, dm);
    let mut zx = Vec::new();
    let mut zy = Vec::new();
    for (x, y) in batch.music.iter().zip(&batch.dance) {
        zx.push(md.encode(x)?.1.scale(sx));
        zy.push(dm.encode(y)?.1.scale(sy));
    }
    let zx = Tensor::concat(&zx.iter().collect::<Vec<_>>(), 0)?;
    let zy = Tensor::concat(&zy.iter().collect::<Vec<_>>(), 0)?;
    Ok(entropic_gw(&zx, &zy, &cfg.gw)?.value)
}

fn zero_grads(g: &Generator) -> Vec<Tensor> {
    g.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
}

/// Summed teacher-forced reconstruction metrics `(dance, music)` over a batch.
pub fn reconstruction_losses(batch: &Batch, md: &Generator, dm: &Generator) -> std::result::Result<(f64, f64), TrainError> {
    let mut out = (0.0, 0.0);
    for (x, y) in batch.music.iter().zip(&batch.dance) {
        let xs = symbolic(x)?;
        let yh = md.teacher_forced(x, y.row(0), y)?;
        out.0 += dance_metric_frames(&yh, y)?;
        let xh = dm.teacher_forced(y, xs.row(0), &xs)?;
        out.1 += music_metric_symbolic(&xh, &xs)?;
    }
    Ok(out)
}

/// Summed cycle metrics `(dance, music)`: the intermediate is generated
/// autoregressively, the second stage is teacher-forced on the original.
pub fn cycle_losses(batch: &Batch, md: &Generator, dm: &Generator) -> std::result::Result<(f64, f64), TrainError> {
    let mut out = (0.0, 0.0);
    for (x, y) in batch.music.iter().zip(&batch.dance) {
        let xs = symbolic(x)?;
        let t = x.rows();
        let (ctx_y, _) = dm.encode(y)?;
        let mid = lift_symbolic(&dm.decode_trace(&ctx_y, xs.row(0), t)?.raw);
        let yh = md.teacher_forced(&mid, y.row(0), y)?;
        out.0 += dance_metric_frames(&yh, y)?;
        let (ctx_x, _) = md.encode(x)?;
        let mid = md.decode_trace(&ctx_x, y.row(0), t)?.raw;
        let xh = dm.teacher_forced(&mid, xs.row(0), &xs)?;
        out.1 += music_metric_symbolic(&xh, &xs)?;
    }
    Ok(out)
}

use serde::{Deserialize, Serialize};

use super::{shape_err, Result, Tensor, TensorError};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Piecewise-constant learning rate: `base` until the first milestone, then
/// each milestone's rate from its step onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { base: lr, milestones: Vec::new() }
    }

    pub fn paper() -> Self {
        LrSchedule { base: 1e-4, milestones: vec![(20_000, 1e-5), (40_000, 5e-6)] }
    }

    /// Rate used for the update numbered `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        self.milestones
            .iter().rfind(|(s, _)| step >= *s)
            .map_or(self.base, |(_, lr)| *lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { schedule: LrSchedule::paper(), beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.step)
    }

    /// Apply one bias-corrected update. Nothing is modified if any gradient
    /// is non-finite or mis-shaped. Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(shape_err(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors[i].shape() {
                return Err(shape_err(
                    "adam",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), params.names[i], params.tensors[i].shape()),
                ));
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient { name: params.names[i].clone() });
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

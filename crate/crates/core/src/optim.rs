//! Adam and momentum SGD over flat parameter lists, plus global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD with momentum and a polynomial learning-rate decay
/// `lr(t) = (lr0 - end_lr) · (1 - t/T)^power + end_lr`, held at `end_lr`
/// after `T` steps. `decay_steps = 0` disables the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub end_lr: f64,
    pub power: f64,
    pub decay_steps: u64,
}

impl SgdConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        let frac = 1.0 - (step.min(self.decay_steps) as f64 / self.decay_steps as f64);
        (self.lr - self.end_lr) * frac.powf(self.power) + self.end_lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam(AdamConfig),
    SgdMomentum(SgdConfig),
}

/// Optimizer with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        Self::new(OptimizerKind::Adam(cfg))
    }

    pub fn sgd(cfg: SgdConfig) -> Self {
        Self::new(OptimizerKind::SgdMomentum(cfg))
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam(c) => c.lr,
            OptimizerKind::SgdMomentum(c) => c.lr_at(self.step),
        }
    }

    fn ensure_buffers(&mut self, params: &[&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if matches!(self.kind, OptimizerKind::Adam(_)) {
                self.second = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("optimizer_step", format!("{} parameters", self.first.len()), params.len()));
        }
        for (m, p) in self.first.iter().zip(params) {
            if m.shape() != p.shape() {
                return Err(Error::shape("optimizer_step", format!("{:?}", m.shape()), format!("{:?}", p.shape())));
            }
        }
        Ok(())
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer_step", format!("{} gradients", params.len()), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
        }
        self.ensure_buffers(params)?;
        match self.kind {
            OptimizerKind::Adam(c) => {
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum(c) => {
                let lr = c.lr_at(self.step);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let vel = self.first[i].data_mut();
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *vv = c.momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Result, RomError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `lr · wd · p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; moments mirror the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: EncoderParams,
    pub v: EncoderParams,
}

impl Adam {
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(RomError::Diverged("non-finite gradient".into()));
        }
        let shapes = |p: &EncoderParams| p.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>();
        if shapes(params) != shapes(grads) || shapes(params) != shapes(&self.m) {
            return Err(RomError::ShapeMismatch("gradient/optimizer shapes differ from parameters".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let gs = grads.tensors();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        for (((_, mut p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(gs.iter())
            .zip(ms.iter_mut().zip(vs.iter_mut()))
        {
            ndarray::Zip::from(&mut p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    LinearWarmup,
    CosineWarmRestarts,
}

impl LrKind {
    pub fn name(self) -> &'static str {
        match self {
            LrKind::Constant => "constant",
            LrKind::LinearWarmup => "linear_warmup",
            LrKind::CosineWarmRestarts => "cosine_warm_restarts",
        }
    }
}

impl fmt::Display for LrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LrKind {
    type Err = RomError;
    fn from_str(s: &str) -> Result<Self> {
        [LrKind::Constant, LrKind::LinearWarmup, LrKind::CosineWarmRestarts]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RomError::invalid(format!("unknown lr schedule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Step at which linear decay reaches zero.
    pub total_steps: usize,
    pub restart_period_epochs: usize,
}

impl LrSchedule {
    /// Learning rate for 1-based `step`, at fractional `epoch`.
    ///
    /// Warmup ramps `base · step / warmup_steps` for every kind. After it,
    /// `linear_warmup` decays linearly to 0 at `total_steps` and
    /// `cosine_warm_restarts` follows `base · ½(1 + cos(π (epoch mod P) / P))`.
    pub fn lr_at(&self, step: usize, epoch: f64) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let shape = match self.kind {
            LrKind::Constant => 1.0,
            LrKind::LinearWarmup => {
                if step <= self.warmup_steps || self.total_steps <= self.warmup_steps {
                    1.0
                } else {
                    let left = self.total_steps.saturating_sub(step) as f64;
                    left / (self.total_steps - self.warmup_steps) as f64
                }
            }
            LrKind::CosineWarmRestarts => {
                let p = self.restart_period_epochs.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * epoch.rem_euclid(p) / p).cos())
            }
        };
        self.base_lr * warm * shape
    }
}

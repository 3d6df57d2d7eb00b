//! Adam with decoupled weight decay and a warmup-then-decay schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grads, ParamSet};

/// What the learning rate does once warmup ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    #[default]
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub decay: Decay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 1e-2, peak_lr: 1e-4, warmup_frac: 0.048, decay: Decay::Linear }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.peak_lr >= 0.0) {
            return Err(Error::Config("eps must be positive, weight decay and learning rate non-negative".into()));
        }
        if !unit(self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_frac)));
        }
        Ok(())
    }
}

/// Number of warmup steps: the rounded fraction of `total`, kept below
/// `total` so the schedule still ends at zero.
pub fn warmup_steps(total: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * total as f64).round() as usize).min(total.saturating_sub(1))
}

fn schedule(step: usize, total: usize, warmup_frac: f64, peak: f64, decay: Decay) -> Result<f64> {
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::Config(format!("warmup fraction {warmup_frac} outside [0, 1)")));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond the {total}-step schedule")));
    }
    let warmup = warmup_steps(total, warmup_frac);
    if warmup > 0 && step <= warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    Ok(match decay {
        Decay::Constant => peak,
        Decay::Linear => peak * (total - step) as f64 / (total - warmup) as f64,
    })
}

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup_frac: f64, peak: f64) -> Result<f64> {
    schedule(step, total, warmup_frac, peak, Decay::Linear)
}

/// Moments and step counter for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub total_steps: usize,
    pub t: usize,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        Ok(Self { config, total_steps, t: 0, m: zeros(), v: zeros() })
    }

    /// Learning rate for the update about to be taken.
    pub fn next_lr(&self) -> Result<f64> {
        let c = &self.config;
        schedule(self.t + 1, self.total_steps, c.warmup_frac, c.peak_lr, c.decay)
    }
}

/// One update: decoupled weight decay on decaying parameters, then the
/// bias-corrected Adam step. Nothing changes if any gradient is non-finite.
/// Returns the learning rate used.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, state: &mut OptimizerState) -> Result<f64> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.tensors.len(), params.len())));
    }
    for (p, g) in params.iter().zip(&grads.tensors) {
        if p.value.dim() != g.dim() {
            return Err(Error::Shape(format!("gradient of {} is {:?}, parameter is {:?}", p.name, g.dim(), p.value.dim())));
        }
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} in {}", p.name)));
        }
    }
    let lr = state.next_lr()?;
    state.t += 1;
    let c = state.config.clone();
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(&grads.tensors).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let wd = if p.decay { lr * c.weight_decay } else { 0.0 };
        Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|th, &g, m, v| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *th -= wd * *th;
            *th -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
        });
    }
    Ok(lr)
}

//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::nn::{scalar, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-4, grad_clip: 1.0 }
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the gradients of every parameter in `params`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let norm = Self::grad_norm(params, grads)?;
        if !norm.is_finite() {
            return Err(AlamError::non_finite("gradient norm"));
        }
        let c = self.config;
        let clip_scale = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients may carry autograd history; keep the moments graph-free.
            let g = (g.detach() * clip_scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor().detach();
            let decayed = (&theta * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    /// Moment tensors keyed by parameter name, for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<String, (Tensor, Tensor)>) {
        (self.step, &self.moments)
    }

    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments;
    }
}

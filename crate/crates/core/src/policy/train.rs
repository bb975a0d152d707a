use serde::{Deserialize, Serialize};

use super::data::DemoSet;
use super::model::PolicyModel;
use crate::error::{AlamError, Result};
use crate::nn::scalar;
use crate::optim::AdamW;
use crate::rng::{child_rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStepRecord {
    pub step: u64,
    pub loss: f64,
    /// `[th, wr, u]` per-modality losses.
    pub parts: [f64; 3],
    pub grad_norm: f64,
}

pub struct PolicyTrainer {
    pub model: PolicyModel,
    pub optimizer: AdamW,
    pub rng: Rng,
    pub step: u64,
}

impl PolicyTrainer {
    pub fn new(model: PolicyModel, seed: u64) -> Self {
        let optimizer = AdamW::new(model.config.optimizer);
        Self { model, optimizer, rng: child_rng(seed, "policy.sampler"), step: 0 }
    }

    pub fn check_demos(&self, demos: &DemoSet) -> Result<()> {
        if demos.horizon != self.model.config.horizon {
            return Err(AlamError::invalid(format!(
                "demo horizon {} differs from policy horizon {}",
                demos.horizon, self.model.config.horizon
            )));
        }
        if self.model.arm().uses_latents() && demos.latent_dim() != self.model.latent_dim {
            return Err(AlamError::invalid("demo latent width differs from the policy projection"));
        }
        Ok(())
    }

    pub fn step(&mut self, demos: &DemoSet) -> Result<PolicyStepRecord> {
        let cfg = &self.model.config;
        let batch = demos.sample_batch(cfg.batch_size, cfg.net.pool, &mut self.rng, self.model.dtype())?;
        let loss = self.model.loss(&batch, &mut self.rng)?;
        let value = scalar(&loss.total)?;
        if !value.is_finite() {
            return Err(AlamError::non_finite("policy loss"));
        }
        let grads = loss.total.backward()?;
        let grad_norm = self.optimizer.step(&self.model.params, &grads)?;
        if !grad_norm.is_finite() {
            return Err(AlamError::non_finite("policy gradient"));
        }
        self.step += 1;
        Ok(PolicyStepRecord { step: self.step, loss: value, parts: loss.parts, grad_norm })
    }
}

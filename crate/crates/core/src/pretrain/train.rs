use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{AlamModel, LossOptions, TrainBatch};
use super::{LossBreakdown, PretrainConfig};
use crate::error::{AlamError, Result};
use crate::optim::AdamW;
use crate::rng::{child_rng, Rng};
use crate::synthworld::{sample_triplet_indices, Dataset, Frame, View};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    /// Distinct code indices used by the batch.
    pub codes_used: usize,
    pub restarted: usize,
}

/// Owns the model, optimiser state and sampling RNG of one pretraining run.
pub struct Pretrainer {
    pub model: AlamModel,
    pub config: PretrainConfig,
    pub optimizer: AdamW,
    pub rng: Rng,
    pub step: u64,
}

impl Pretrainer {
    pub fn new(model: AlamModel, config: PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            rng: child_rng(seed, "pretrain.sampler"),
            model,
            config,
            step: 0,
        })
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.config.mode.effective_weights(self.config.weights),
            vq_include_reverse: self.config.vq_include_reverse,
            decoder_input: self.model.default_decoder_input(),
        }
    }

    /// Draws one batch: each row picks a training episode, a view and a
    /// triplet. Pair mode keeps the triplet's three forward pairs.
    pub fn sample_batch(&mut self, dataset: &Dataset, train_ids: &[usize]) -> Result<TrainBatch> {
        if train_ids.is_empty() {
            return Err(AlamError::invalid("no training episodes"));
        }
        let mut items: Vec<[&Frame; 3]> = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let ep = &dataset.episodes[train_ids[self.rng.gen_range(0..train_ids.len())]];
            let view = View::ALL[self.rng.gen_range(0..2)];
            let (a, b, c) = sample_triplet_indices(ep.len(), &mut self.rng, self.config.gaps)?;
            let f = ep.frames(view);
            items.push([&f[a], &f[b], &f[c]]);
        }
        let patch = self.model.spec.encoder.patch_size;
        let dtype = self.model.dtype();
        if self.config.mode.uses_triplets() {
            TrainBatch::from_triplets(&items, patch, dtype)
        } else {
            TrainBatch::forward_legs(&items, patch, dtype)
        }
    }

    /// One optimisation step. On a non-finite loss nothing is updated.
    pub fn step(&mut self, dataset: &Dataset, train_ids: &[usize]) -> Result<StepRecord> {
        let batch = self.sample_batch(dataset, train_ids)?;
        if !self.model.codebook_ready {
            let z = self.model.encoder.forward_raw(&batch.src, &batch.tgt)?.latents.detach();
            let dz = self.model.encoder.latent_dim();
            let samples: Vec<Vec<f64>> =
                crate::nn::to_f64_vec(&z)?.chunks_exact(dz).map(|r| r.to_vec()).collect();
            self.model.codebook.init_from_samples(&samples, &mut self.rng);
            self.model.codebook_ready = true;
        }
        let opts = self.loss_options();
        let out = self.model.forward(&batch, &opts)?;
        let grads = out.terms.total.backward()?;
        let grad_norm = self.optimizer.step(&self.model.params, &grads)?;
        self.model.codebook.ema_update(&out.vq_latents, &out.indices)?;
        let q = &self.model.spec.quantizer;
        let restarted = if q.random_restart {
            self.model.codebook.restart_dead(&out.vq_latents, q.restart_threshold, &mut self.rng)
        } else {
            0
        };
        if !self.model.codebook.is_finite() {
            return Err(AlamError::non_finite("codebook after EMA update"));
        }
        let mut used = out.indices.clone();
        used.sort_unstable();
        used.dedup();
        let record =
            StepRecord { step: self.step, breakdown: out.breakdown, grad_norm, codes_used: used.len(), restarted };
        self.step += 1;
        Ok(record)
    }

    pub fn epoch_done(&self) -> bool {
        self.step > 0 && self.step % self.config.steps_per_epoch == 0
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::ModelSpec;
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::nn::Precision;
    use crate::optim::AdamWConfig;
    use crate::quantizer::QuantizerConfig;
    use crate::synthworld::{GapRange, WorldConfig};

    fn setup(lr: f64) -> (Pretrainer, Dataset) {
        let spec = ModelSpec {
            resolution: 16,
            encoder: EncoderConfig { patch_size: 4, hidden: 16, layers: 1, heads: 2, queries: 2, latent_dim: 4, mlp_ratio: 2, ..Default::default() },
            quantizer: QuantizerConfig { codebook_size: 3, ..Default::default() },
            decoder: DecoderConfig { hidden: 16, blocks: 1, heads: 2, latent_tokens: 2, mlp_ratio: 2 },
            precision: Precision::F32,
        };
        let wc = WorldConfig { resolution: 16, ..Default::default() };
        let data = Dataset::generate(&wc, 4, 12, 1).unwrap();
        let cfg = PretrainConfig {
            batch_size: 2,
            gaps: GapRange { min: 1, max: 3 },
            optimizer: AdamWConfig { lr, ..Default::default() },
            episode_len: 12,
            ..Default::default()
        };
        (Pretrainer::new(AlamModel::new(&spec, 0).unwrap(), cfg, 7).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut t, data) = setup(0.0);
        let before = t.model.params.export().unwrap();
        for _ in 0..3 {
            t.step(&data, &[0, 1, 2, 3]).unwrap();
        }
        assert_eq!(before, t.model.params.export().unwrap());
        assert_eq!(t.step, 3);
        assert!(t.model.codebook_ready);
    }

    #[test]
    fn same_seed_same_records() {
        let run = || {
            let (mut t, data) = setup(1e-3);
            (0..3).map(|_| t.step(&data, &[0, 1, 2]).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lam_mode_has_no_algebraic_terms() {
        let (mut t, data) = setup(1e-3);
        t.config.mode = super::super::PretrainMode::Lam;
        let r = t.step(&data, &[0, 1]).unwrap();
        assert_eq!((r.breakdown.l_add, r.breakdown.l_rev), (0.0, 0.0));
        assert_eq!(r.breakdown.weights.add, 0.0);
    }
}

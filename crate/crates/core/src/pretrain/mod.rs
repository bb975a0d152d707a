//! Pretraining objective and optimisation loop.
//!
//! A triplet `(a, b, c)` expands into four ordered pairs: the forward legs
//! `(a,b)`, `(b,c)`, the long pair `(a,c)`, and the reversed leg `(b,a)`.
//! All four are encoded and quantised; only the three forward pairs are
//! decoded. Composition and reversal penalties act on the continuous
//! encoder outputs.

mod model;
mod perceptual;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::optim::AdamWConfig;
use crate::synthworld::{Frame, GapRange};

pub use model::{AlamModel, BatchLayout, DecoderInput, ForwardOutput, LossOptions, LossTerms, ModelSpec, TrainBatch};
pub use perceptual::{perceptual_distance, PerceptualPyramid};
pub use train::{Pretrainer, StepRecord};

/// The four pairs derived from one triplet, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub fwd: [(usize, usize); 3],
    pub rev: (usize, usize),
}

impl PairSet {
    /// All four pairs: `(a,b), (b,c), (a,c), (b,a)`.
    pub fn all(&self) -> [(usize, usize); 4] {
        [self.fwd[0], self.fwd[1], self.fwd[2], self.rev]
    }
}

pub fn build_pair_set(indices: (usize, usize, usize)) -> Result<PairSet> {
    let (a, b, c) = indices;
    if !(a < b && b < c) {
        return Err(AlamError::invalid(format!("triplet ({a},{b},{c}) is not strictly increasing")));
    }
    Ok(PairSet { fwd: [(a, b), (b, c), (a, c)], rev: (b, a) })
}

fn check_dims(parts: &[&[f64]]) -> Result<()> {
    let d = parts[0].len();
    if parts.iter().any(|p| p.len() != d) {
        return Err(AlamError::invalid("latent dimensions differ"));
    }
    Ok(())
}

/// `||z_ac - (z_ab + z_bc)||^2`.
pub fn loss_add(z_ab: &[f64], z_bc: &[f64], z_ac: &[f64]) -> Result<f64> {
    check_dims(&[z_ab, z_bc, z_ac])?;
    Ok(z_ab.iter().zip(z_bc).zip(z_ac).map(|((x, y), z)| (z - x - y).powi(2)).sum())
}

/// `||z_ab + z_ba||^2`.
pub fn loss_rev(z_ab: &[f64], z_ba: &[f64]) -> Result<f64> {
    check_dims(&[z_ab, z_ba])?;
    Ok(z_ab.iter().zip(z_ba).map(|(x, y)| (x + y).powi(2)).sum())
}

/// Mean over pairs of the per-pair mean squared pixel error.
pub fn loss_rec(reconstructions: &[Frame], targets: &[Frame]) -> Result<f64> {
    if reconstructions.len() != targets.len() || reconstructions.is_empty() {
        return Err(AlamError::invalid("reconstruction and target batches differ in length"));
    }
    let mut total = 0.0;
    for (r, t) in reconstructions.iter().zip(targets) {
        if !r.same_shape(t) {
            return Err(AlamError::invalid("reconstruction and target shapes differ"));
        }
        let se: f64 = r.pixels.iter().zip(&t.pixels).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        total += se / r.pixels.len() as f64;
    }
    Ok(total / targets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vq: f64,
    pub rec: f64,
    pub perc: f64,
    pub add: f64,
    pub rev: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { vq: 1.0, rec: 1.0, perc: 1.0, add: 1.0, rev: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vq: f64,
    pub l_rec: f64,
    pub l_perc: f64,
    pub l_add: f64,
    pub l_rev: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Builds a breakdown from `(l_vq, l_rec, l_perc, l_add, l_rev)`.
    pub fn new(components: [f64; 5], weights: LossWeights) -> Result<Self> {
        let names = ["l_vq", "l_rec", "l_perc", "l_add", "l_rev"];
        let bad: Vec<String> = names
            .iter()
            .zip(components)
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        if !bad.is_empty() {
            return Err(AlamError::non_finite(format!("pretraining loss ({})", bad.join(", "))));
        }
        let [l_vq, l_rec, l_perc, l_add, l_rev] = components;
        let w = weights;
        let total = w.vq * l_vq + w.rec * l_rec + w.perc * l_perc + w.add * l_add + w.rev * l_rev;
        Ok(Self { l_vq, l_rec, l_perc, l_add, l_rev, total, weights })
    }

    pub fn components(&self) -> [f64; 5] {
        [self.l_vq, self.l_rec, self.l_perc, self.l_add, self.l_rev]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    #[default]
    Alam,
    /// Pair sampling, no algebraic penalties.
    Lam,
    AlamNoAdd,
    AlamNoRev,
    AlamNoBoth,
}

impl PretrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| AlamError::invalid(format!("unknown pretraining mode `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            PretrainMode::Alam => "alam",
            PretrainMode::Lam => "lam",
            PretrainMode::AlamNoAdd => "alam-no-add",
            PretrainMode::AlamNoRev => "alam-no-rev",
            PretrainMode::AlamNoBoth => "alam-no-both",
        }
    }

    pub fn uses_triplets(self) -> bool {
        self != PretrainMode::Lam
    }

    pub fn effective_weights(self, base: LossWeights) -> LossWeights {
        let mut w = base;
        if matches!(self, PretrainMode::Lam | PretrainMode::AlamNoAdd | PretrainMode::AlamNoBoth) {
            w.add = 0.0;
        }
        if matches!(self, PretrainMode::Lam | PretrainMode::AlamNoRev | PretrainMode::AlamNoBoth) {
            w.rev = 0.0;
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub gaps: GapRange,
    pub weights: LossWeights,
    /// Whether the reversed pair contributes to the commitment loss.
    pub vq_include_reverse: bool,
    pub episodes: usize,
    pub episode_len: usize,
    pub test_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Alam,
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            steps: 20_000,
            steps_per_epoch: 1_000,
            gaps: GapRange { min: 1, max: 5 },
            weights: LossWeights::default(),
            vq_include_reverse: true,
            episodes: 5_000,
            episode_len: 32,
            test_fraction: 0.05,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        GapRange::new(self.gaps.min, self.gaps.max)?;
        if self.batch_size == 0 {
            return Err(AlamError::invalid("pretrain.batch_size must be positive"));
        }
        if self.steps_per_epoch == 0 {
            return Err(AlamError::invalid("pretrain.steps_per_epoch must be positive"));
        }
        if self.episode_len < 2 * self.gaps.max + 1 {
            return Err(AlamError::invalid("pretrain.episode_len is too short for the gap range"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(AlamError::invalid("pretrain.test_fraction must lie in [0,1)"));
        }
        let w = self.weights;
        if [w.vq, w.rec, w.perc, w.add, w.rev].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AlamError::invalid("pretrain.weights must be finite and non-negative"));
        }
        Ok(())
    }
}

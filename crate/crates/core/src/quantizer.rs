//! Vector-quantization bottleneck with an EMA-updated codebook.
//!
//! The codebook is plain `f64` state outside the autograd graph: it only moves
//! through [`Codebook::ema_update`]. Tensor-side helpers always detach the
//! looked-up entries, so no loss can route gradient into the codebook.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::nn::{from_f64, to_f64_vec, DEVICE};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub codebook_size: usize,
    pub decay: f64,
    /// Floor on the EMA count in the entry denominator.
    pub count_floor: f64,
    /// Feed the decoder `z + sg(z_q - z)` (true) or `sg(z_q)` (false).
    pub straight_through: bool,
    /// Re-seed entries whose EMA count drops below `restart_threshold`.
    pub random_restart: bool,
    pub restart_threshold: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 7,
            decay: 0.99,
            count_floor: 1e-5,
            straight_through: true,
            random_restart: false,
            restart_threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Vec<Vec<f64>>,
    pub counts: Vec<f64>,
    pub sums: Vec<Vec<f64>>,
    pub decay: f64,
    pub count_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    pub z_q: Vec<f64>,
    pub code_index: usize,
    pub commit_loss: f64,
}

pub struct QuantizedBatch {
    /// `(N, D)` selected entries, detached.
    pub z_q: Tensor,
    pub indices: Vec<usize>,
    /// `(N,)` per-row `||z - sg(z_q)||^2`.
    pub commit: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest entry; ties go to the lowest index.
pub fn nearest(z: &[f64], entries: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let d = sq_dist(z, e);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

impl Codebook {
    /// Builds a codebook with counts 1 and sums equal to the entries.
    pub fn from_entries(entries: Vec<Vec<f64>>, decay: f64, count_floor: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(AlamError::invalid("codebook must have at least one entry"));
        }
        let dim = entries[0].len();
        if entries.iter().any(|e| e.len() != dim) {
            return Err(AlamError::invalid("codebook entries differ in dimension"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(AlamError::invalid(format!("EMA decay must lie in (0,1), got {decay}")));
        }
        let counts = vec![1.0; entries.len()];
        let sums = entries.clone();
        Ok(Self { entries, counts, sums, decay, count_floor })
    }

    pub fn random(config: &QuantizerConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (dim.max(1) as f64).sqrt()).expect("valid std");
        let entries =
            (0..config.codebook_size).map(|_| (0..dim).map(|_| normal.sample(rng)).collect()).collect();
        Self::from_entries(entries, config.decay, config.count_floor)
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.len())
    }

    /// Replaces every entry by a distinct random sample (with repeats only
    /// when there are fewer samples than entries).
    pub fn init_from_samples(&mut self, samples: &[Vec<f64>], rng: &mut Rng) {
        if samples.is_empty() {
            return;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        for i in 0..self.size() {
            let s = samples[order[i % order.len()]].clone();
            self.entries[i] = s.clone();
            self.sums[i] = s;
            self.counts[i] = 1.0;
        }
    }

    pub fn entries_tensor(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self.entries.iter().flatten().copied().collect();
        from_f64(&flat, &[self.size(), self.dim()], dtype)
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizeResult> {
        if z.len() != self.dim() {
            return Err(AlamError::invalid(format!("latent dim {} != codebook dim {}", z.len(), self.dim())));
        }
        let code_index = nearest(z, &self.entries).ok_or_else(|| AlamError::invalid("empty codebook"))?;
        let z_q = self.entries[code_index].clone();
        let commit_loss = sq_dist(z, &z_q);
        Ok(QuantizeResult { z_q, code_index, commit_loss })
    }

    /// One EMA step from a batch of continuous latents and their assignments.
    pub fn ema_update(&mut self, batch: &[Vec<f64>], indices: &[usize]) -> Result<()> {
        if batch.len() != indices.len() {
            return Err(AlamError::invalid("latent and index batches differ in length"));
        }
        let (m, dim) = (self.size(), self.dim());
        let mut assigned = vec![0.0; m];
        let mut sums = vec![vec![0.0; dim]; m];
        for (z, &i) in batch.iter().zip(indices) {
            if i >= m {
                return Err(AlamError::invalid(format!("code index {i} out of range")));
            }
            if z.len() != dim {
                return Err(AlamError::invalid("latent dimension mismatch in EMA update"));
            }
            assigned[i] += 1.0;
            for (s, v) in sums[i].iter_mut().zip(z) {
                *s += v;
            }
        }
        let g = self.decay;
        for i in 0..m {
            self.counts[i] = g * self.counts[i] + (1.0 - g) * assigned[i];
            let denom = self.counts[i].max(self.count_floor);
            for k in 0..dim {
                self.sums[i][k] = g * self.sums[i][k] + (1.0 - g) * sums[i][k];
                self.entries[i][k] = self.sums[i][k] / denom;
            }
        }
        Ok(())
    }

    /// Re-seeds entries whose EMA count fell below `threshold` from `batch`.
    pub fn restart_dead(&mut self, batch: &[Vec<f64>], threshold: f64, rng: &mut Rng) -> usize {
        let mut restarted = 0;
        if batch.is_empty() {
            return 0;
        }
        for i in 0..self.size() {
            if self.counts[i] < threshold {
                let s = batch.choose(rng).expect("non-empty").clone();
                self.entries[i] = s.clone();
                self.sums[i] = s;
                self.counts[i] = 1.0;
                restarted += 1;
            }
        }
        restarted
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().chain(&self.sums).flatten().all(|v| v.is_finite())
            && self.counts.iter().all(|c| c.is_finite())
    }
}

/// Quantizes every row of `z: (N, D)` against `entries: (M, D)`.
pub fn quantize_batch(z: &Tensor, entries: &Tensor) -> Result<QuantizedBatch> {
    let (n, dim) = z.dims2()?;
    let (m, edim) = entries.dims2()?;
    if m == 0 {
        return Err(AlamError::invalid("empty codebook"));
    }
    if dim != edim {
        return Err(AlamError::invalid(format!("latent dim {dim} != codebook dim {edim}")));
    }
    let zv = to_f64_vec(&z.detach())?;
    let ev = to_f64_vec(&entries.detach())?;
    let rows: Vec<Vec<f64>> = ev.chunks_exact(dim).map(|r| r.to_vec()).collect();
    let indices: Vec<usize> =
        zv.chunks_exact(dim).map(|r| nearest(r, &rows).expect("non-empty codebook")).collect();
    debug_assert_eq!(indices.len(), n);
    let ids = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, &DEVICE)?;
    let z_q = entries.index_select(&ids, 0)?.detach();
    let commit = (z - &z_q)?.sqr()?.sum(1)?;
    Ok(QuantizedBatch { z_q, indices, commit })
}

/// Forward value `z_q` (bit-exact), backward identity with respect to `z`.
pub fn straight_through(z: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    Ok(((z - z.detach())? + z_q.detach())?)
}

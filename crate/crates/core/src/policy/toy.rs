//! One-dimensional flow-matching check on a two-point target.

use candle_core::{DType, Tensor};
use rand::Rng as _;

use super::flow::{euler, sample_tau};
use crate::error::Result;
use crate::nn::{from_f64, sinusoidal_features, to_f64_vec, Linear, ParamBuilder, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{child_rng, Rng};
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub k_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: 3000, batch: 256, lr: 2e-3, k_steps: 50 }
    }
}

/// `v(x, tau)` as a small MLP.
pub struct ToyFlow {
    layers: [Linear; 3],
    pub params: ParamStore,
}

const FREQS: usize = 4;

impl ToyFlow {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut pb = ParamBuilder::new(DType::F64, seed);
        let layers = [
            Linear::new(&mut pb, "toy.l0", 1 + 2 * FREQS, hidden, true)?,
            Linear::new(&mut pb, "toy.l1", hidden, hidden, true)?,
            Linear::new(&mut pb, "toy.l2", hidden, 1, true)?,
        ];
        Ok(Self { layers, params: pb.finish() })
    }

    /// `x: (B, 1)`, `tau: (B,)`.
    pub fn forward(&self, x: &Tensor, tau: &Tensor) -> Result<Tensor> {
        let h = Tensor::cat(&[x, &sinusoidal_features(tau, FREQS)?], 1)?;
        let h = self.layers[0].forward(&h)?.silu()?;
        let h = self.layers[1].forward(&h)?.silu()?;
        self.layers[2].forward(&h)
    }
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Trains on `y` drawn uniformly from `{-1, +1}` with the L1 velocity loss
/// and returns the model.
pub fn train_two_point(cfg: &ToyConfig, seed: u64) -> Result<ToyFlow> {
    let model = ToyFlow::new(cfg.hidden, seed)?;
    let mut rng = child_rng(seed, "toy.sampler");
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() });
    let b = cfg.batch;
    for _ in 0..cfg.steps {
        let y: Vec<f64> = (0..b).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let tau: Vec<f64> = (0..b).map(|_| sample_tau(&mut rng)).collect();
        let eps = normals(b, &mut rng);
        let x: Vec<f64> = (0..b).map(|i| tau[i] * eps[i] + (1.0 - tau[i]) * y[i]).collect();
        let v: Vec<f64> = (0..b).map(|i| eps[i] - y[i]).collect();
        let pred = model.forward(&from_f64(&x, &[b, 1], DType::F64)?, &from_f64(&tau, &[b], DType::F64)?)?;
        let loss = (pred - from_f64(&v, &[b, 1], DType::F64)?)?.abs()?.mean_all()?;
        let grads = loss.backward()?;
        opt.step(&model.params, &grads)?;
    }
    Ok(model)
}

/// Draws `n` samples by Euler integration from standard-normal noise.
pub fn sample_two_point(model: &ToyFlow, n: usize, k_steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = child_rng(seed, "toy.noise");
    let x0 = from_f64(&normals(n, &mut rng), &[n, 1], DType::F64)?;
    let out = euler(vec![x0], k_steps, |x, tau| {
        let t = from_f64(&vec![tau; n], &[n], DType::F64)?;
        Ok(vec![model.forward(&x[0], &t)?])
    })?;
    to_f64_vec(&out[0])
}

/// Fraction of samples within `tol` of either mode, and fraction of those
/// near `+1`.
pub fn two_point_stats(samples: &[f64], tol: f64) -> (f64, f64) {
    let near: Vec<f64> = samples.iter().copied().filter(|s| (s.abs() - 1.0).abs() <= tol).collect();
    let frac = near.len() as f64 / samples.len().max(1) as f64;
    let pos = near.iter().filter(|s| **s > 0.0).count() as f64 / near.len().max(1) as f64;
    (frac, pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let (f, p) = two_point_stats(&[1.0, -1.05, 0.0, 0.95], 0.1);
        assert!((f - 0.75).abs() < 1e-12);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
    }
}

//! Flow-matching primitives: time sampling, the shared linear interpolation,
//! L1 velocity loss, and Euler integration from noise to data.

use candle_core::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::nn::{from_f64, scalar};
use crate::rng::Rng;

pub const TAU_MIN: f64 = 0.001;

/// Maps a uniform draw `u` in `(0, 1]` to `tau = 0.999 * u^(2/3) + 0.001`.
pub fn tau_from_uniform(u: f64) -> f64 {
    (1.0 - TAU_MIN) * u.powf(2.0 / 3.0) + TAU_MIN
}

/// Draws `tau` whose affine pre-image follows `Beta(1.5, 1)`.
pub fn sample_tau(rng: &mut Rng) -> f64 {
    let u = 1.0 - rng.gen::<f64>();
    tau_from_uniform(u)
}

/// One flow-matching draw for a batch: a shared `tau` per row and
/// independent noise per modality.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub tau: Vec<f64>,
    pub eps: Vec<Tensor>,
    pub x: Vec<Tensor>,
    pub v_target: Vec<Tensor>,
}

/// Standard-normal tensor drawn from `rng` (row-major fill order).
pub fn normal_tensor(shape: &[usize], rng: &mut Rng, dtype: candle_core::DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    from_f64(&data, shape, dtype)
}

fn tau_column(tau: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![tau.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    from_f64(tau, &shape, like.dtype())
}

/// Builds `x = tau * eps + (1 - tau) * y` and `v = eps - y` per modality.
/// `y` values are taken as fixed targets for the velocity (detached).
pub fn flow_sample_at(ys: &[Tensor], tau: &[f64], eps: Vec<Tensor>) -> Result<FlowSample> {
    if ys.len() != eps.len() {
        return Err(AlamError::invalid("one noise tensor per modality is required"));
    }
    let mut x = Vec::with_capacity(ys.len());
    let mut v_target = Vec::with_capacity(ys.len());
    for (y, e) in ys.iter().zip(&eps) {
        if y.dims() != e.dims() || y.dim(0)? != tau.len() {
            return Err(AlamError::invalid("flow sample shapes disagree"));
        }
        let t = tau_column(tau, y)?;
        let one_minus = (t.ones_like()? - &t)?;
        x.push((e.broadcast_mul(&t)? + y.broadcast_mul(&one_minus)?)?);
        v_target.push((e - y.detach())?);
    }
    Ok(FlowSample { tau: tau.to_vec(), eps, x, v_target })
}

/// Draws `tau` per row, then noise per modality in order.
pub fn make_flow_sample(ys: &[Tensor], rng: &mut Rng) -> Result<FlowSample> {
    let b = ys.first().ok_or_else(|| AlamError::invalid("no modalities"))?.dim(0)?;
    let tau: Vec<f64> = (0..b).map(|_| sample_tau(rng)).collect();
    let eps = ys.iter().map(|y| normal_tensor(y.dims(), rng, y.dtype())).collect::<Result<Vec<_>>>()?;
    flow_sample_at(ys, &tau, eps)
}

/// Mean absolute error per modality.
pub fn l1_per_modality(pred: &[Tensor], target: &[Tensor]) -> Result<Vec<Tensor>> {
    if pred.len() != target.len() {
        return Err(AlamError::invalid("prediction and target modality counts differ"));
    }
    pred.iter().zip(target).map(|(p, t)| Ok((p - t)?.abs()?.mean_all()?)).collect()
}

/// Weighted sum of per-modality losses, with a non-finite check.
pub fn weighted_total(parts: &[Tensor], weights: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    let first = parts.first().ok_or_else(|| AlamError::invalid("no loss terms"))?;
    let mut total = Tensor::zeros((), first.dtype(), first.device())?;
    let mut values = Vec::with_capacity(parts.len());
    for (p, &w) in parts.iter().zip(weights) {
        let v = scalar(p)?;
        if !v.is_finite() {
            return Err(AlamError::non_finite("flow-matching loss"));
        }
        values.push(v);
        if w != 0.0 {
            total = (total + (p * w)?)?;
        }
    }
    Ok((total, values))
}

/// Explicit Euler from `tau = 1` to `tau = 0` with `k_steps` uniform steps:
/// `x <- x - (1/K) * v(x, tau)`.
pub fn euler<F>(x0: Vec<Tensor>, k_steps: usize, mut field: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor], f64) -> Result<Vec<Tensor>>,
{
    if k_steps == 0 {
        return Err(AlamError::invalid("k_steps must be at least 1"));
    }
    let dt = 1.0 / k_steps as f64;
    let mut x = x0;
    for i in 0..k_steps {
        let tau = 1.0 - i as f64 * dt;
        let v = field(&x, tau)?;
        if v.len() != x.len() {
            return Err(AlamError::invalid("velocity field returned the wrong number of modalities"));
        }
        x = x.iter().zip(&v).map(|(xi, vi)| Ok((xi - (vi * dt)?)?)).collect::<Result<Vec<_>>>()?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    #[default]
    None,
    /// Latent tokens stay at their initial noise.
    Freeze,
    /// Action tokens cannot attend to latent tokens.
    Block,
    /// Action tokens see the latent stream in a permuted temporal order.
    Shuffle,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 4] =
        [InterventionKind::None, InterventionKind::Freeze, InterventionKind::Block, InterventionKind::Shuffle];

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| AlamError::invalid(format!("unknown intervention `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::None => "none",
            InterventionKind::Freeze => "freeze",
            InterventionKind::Block => "block",
            InterventionKind::Shuffle => "shuffle",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::rng::rng_from;
    use candle_core::DType;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        from_f64(v, shape, DType::F64).unwrap()
    }

    #[test]
    fn tau_endpoints_and_range() {
        assert_eq!(tau_from_uniform(1.0), 1.0);
        assert!((tau_from_uniform(1e-300) - TAU_MIN).abs() < 1e-12);
        let mut rng = rng_from(0);
        for _ in 0..10_000 {
            let tau = sample_tau(&mut rng);
            assert!(tau > TAU_MIN && tau <= 1.0);
        }
    }

    #[test]
    fn interpolation_examples() {
        let y = t(&[0.0, 0.0], &[1, 1, 2]);
        let eps = t(&[2.0, 2.0], &[1, 1, 2]);
        let s = flow_sample_at(&[y.clone()], &[0.5], vec![eps.clone()]).unwrap();
        assert_eq!(to_f64_vec(&s.x[0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(to_f64_vec(&s.v_target[0]).unwrap(), vec![2.0, 2.0]);
        let y = t(&[0.3, -0.7], &[1, 1, 2]);
        let s0 = flow_sample_at(&[y.clone()], &[0.0], vec![eps.clone()]).unwrap();
        assert_eq!(to_f64_vec(&s0.x[0]).unwrap(), to_f64_vec(&y).unwrap());
        let v0 = to_f64_vec(&s0.v_target[0]).unwrap();
        assert!((v0[0] - 1.7).abs() < 1e-15 && (v0[1] - 2.7).abs() < 1e-15);
        let s1 = flow_sample_at(&[y], &[1.0], vec![eps.clone()]).unwrap();
        assert_eq!(to_f64_vec(&s1.x[0]).unwrap(), to_f64_vec(&eps).unwrap());
    }

    #[test]
    fn shared_tau_across_modalities() {
        let mut rng = rng_from(3);
        let ys: Vec<Tensor> = (0..3).map(|i| t(&[i as f64; 8], &[4, 1, 2])).collect();
        let s = make_flow_sample(&ys, &mut rng).unwrap();
        for m in 0..3 {
            let x = to_f64_vec(&s.x[m]).unwrap();
            let e = to_f64_vec(&s.eps[m]).unwrap();
            for row in 0..4 {
                let tau = s.tau[row];
                for c in 0..2 {
                    let i = row * 2 + c;
                    assert_eq!(x[i], tau * e[i] + (1.0 - tau) * m as f64);
                }
            }
        }
    }

    #[test]
    fn loss_examples() {
        let p = vec![t(&[1.0, 2.0], &[1, 2]), t(&[0.0], &[1, 1]), t(&[0.4], &[1, 1])];
        assert_eq!(to_f64_vec(&l1_per_modality(&p, &p).unwrap()[0]).unwrap(), vec![0.0]);
        let parts = vec![t(&[0.2], &[]), t(&[0.2], &[]), t(&[0.4], &[])];
        let (total, vals) = weighted_total(&parts, &[1.0, 1.0, 1.0]).unwrap();
        assert!((scalar(&total).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(vals, vec![0.2, 0.2, 0.4]);
        let (u_only, _) = weighted_total(&parts, &[0.0, 0.0, 1.0]).unwrap();
        assert!((scalar(&u_only).unwrap() - 0.4).abs() < 1e-12);
        assert!(weighted_total(&[t(&[f64::NAN], &[])], &[1.0]).is_err());
    }

    #[test]
    fn euler_special_fields() {
        let y = t(&[0.25, -1.5, 3.0], &[3]);
        let eps = t(&[1.0, 2.0, -0.5], &[3]);
        let v = (&eps - &y).unwrap();
        for k in [1, 5, 10, 50] {
            let out = euler(vec![eps.clone()], k, |_, _| Ok(vec![v.clone()])).unwrap();
            for (a, b) in to_f64_vec(&out[0]).unwrap().iter().zip(to_f64_vec(&y).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = euler(vec![eps.clone()], 7, |x, _| Ok(vec![x[0].zeros_like()?])).unwrap();
        assert_eq!(to_f64_vec(&zero[0]).unwrap(), to_f64_vec(&eps).unwrap());
        assert!(euler(vec![eps], 0, |x, _| Ok(x.to_vec())).is_err());
    }

    #[test]
    fn intervention_names_round_trip() {
        for k in InterventionKind::ALL {
            assert_eq!(InterventionKind::parse(k.name()).unwrap(), k);
        }
        assert!(InterventionKind::parse("melt").is_err());
    }
}

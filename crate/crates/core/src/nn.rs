//! Small transformer building blocks on top of candle.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that
//! checkpoints, optimizers and gradient checks can walk every parameter group
//! in a fixed order. Initial values come from our own seeded RNG, never from
//! candle's global generator, so parameter init is reproducible.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};

use crate::error::{AlamError, Result};
use crate::rng::{rng_from, Rng};

pub const DEVICE: Device = Device::Cpu;

/// Floating-point width used for a model's parameters and activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Additive attention bias for hidden positions.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(AlamError::invalid(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    /// Merges another store, prefixing nothing; names must not collide.
    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.vars {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }

    /// Copies parameter values (as f64) out of the store.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.dims().to_vec(), to_f64_vec(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites parameter values in place; every stored name must be present.
    pub fn import(&self, values: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| AlamError::invalid(format!("missing parameter {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(AlamError::invalid(format!(
                    "parameter {name}: shape {shape:?} does not match {:?}",
                    var.dims()
                )));
            }
            var.set(&from_f64(data, shape, self.dtype)?)?;
        }
        Ok(())
    }

    /// Sum of squared differences to another store with identical layout.
    pub fn squared_distance(&self, other: &ParamStore) -> Result<f64> {
        let mut total = 0.0;
        for (k, v) in &self.vars {
            let o = other.get(k).ok_or_else(|| AlamError::invalid(format!("missing parameter {k}")))?;
            total += (v.as_tensor() - o.as_tensor())?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(total)
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new(self.dtype);
        for (k, v) in &self.vars {
            out.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)?;
        }
        Ok(out)
    }
}

/// Creates named, deterministically initialised parameters.
pub struct ParamBuilder {
    store: ParamStore,
    rng: Rng,
}

impl ParamBuilder {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { store: ParamStore::new(dtype), rng: rng_from(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| AlamError::invalid(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.add(name, from_f64(&data, shape, self.store.dtype)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.add(name, from_f64(&vec![value; n], shape, self.store.dtype)?)
    }

    fn add(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.store.insert(name.to_string(), var.clone())?;
        Ok(var)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

pub fn from_f64(data: &[f64], shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, &DEVICE)?.to_dtype(dtype)?)
}

pub fn from_f32(data: &[f32], shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, &DEVICE)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar(&t.abs()?.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(AlamError::non_finite(what))
    }
}

/// Converts a boolean visibility matrix (`true` = may attend) into an additive
/// `(rows, cols)` attention bias.
pub fn visibility_bias(visible: &[Vec<bool>], dtype: DType) -> Result<Tensor> {
    let rows = visible.len();
    let cols = visible.first().map_or(0, |r| r.len());
    let data: Vec<f64> =
        visible.iter().flat_map(|r| r.iter().map(|&v| if v { 0.0 } else { MASKED })).collect();
    from_f64(&data, &[rows, cols], dtype)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_std(pb, name, in_dim, out_dim, bias, 1.0 / (in_dim as f64).sqrt())
    }

    pub fn with_std(
        pb: &mut ParamBuilder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = pb.normal(&format!("{name}.weight"), &[in_dim, out_dim], std)?;
        let bias = if bias { Some(pb.constant(&format!("{name}.bias"), &[out_dim], 0.0)?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, self.in_dim))?;
        let mut y = flat.matmul(self.weight.as_tensor())?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar input") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: Var,
    shift: Var,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: pb.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gain.as_tensor())?.broadcast_add(self.shift.as_tensor())?)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AlamError::invalid(format!("hidden size {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(pb, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(pb, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(pb, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(pb, &format!("{name}.o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.dim / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `queries: (B, Nq, d)`, `keys: (B, Nk, d)`; `bias` must broadcast to
    /// `(B, heads, Nq, Nk)`.
    pub fn forward(&self, queries: &Tensor, keys: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, nq, _) = queries.dims3()?;
        let q = self.split_heads(&self.q.forward(queries)?)?;
        let k = self.split_heads(&self.k.forward(keys)?)?;
        let v = self.split_heads(&self.v.forward(keys)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, self.dim))?;
        self.o.forward(&out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(pb, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-norm block with self-attention over `x` followed by cross-attention
/// from `x` into a separate memory sequence.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_query: LayerNorm,
    ln_memory: LayerNorm,
    cross_attn: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl CrossBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(pb, &format!("{name}.ln_self"), dim)?,
            self_attn: Attention::new(pb, &format!("{name}.self_attn"), dim, heads)?,
            ln_query: LayerNorm::new(pb, &format!("{name}.ln_query"), dim)?,
            ln_memory: LayerNorm::new(pb, &format!("{name}.ln_memory"), dim)?,
            cross_attn: Attention::new(pb, &format!("{name}.cross_attn"), dim, heads)?,
            ln_mlp: LayerNorm::new(pb, &format!("{name}.ln_mlp"), dim)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, None)?)?;
        let q = self.ln_query.forward(&x)?;
        let m = self.ln_memory.forward(memory)?;
        let x = (&x + self.cross_attn.forward(&q, &m, None)?)?;
        let h = self.ln_mlp.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Sinusoidal features of a scalar per batch row: `(B,) -> (B, 2 * n_freq)`.
pub fn sinusoidal_features(t: &Tensor, n_freq: usize) -> Result<Tensor> {
    let freqs: Vec<f64> = (0..n_freq).map(|i| std::f64::consts::PI * 2f64.powi(i as i32)).collect();
    let freqs = from_f64(&freqs, &[1, n_freq], t.dtype())?;
    let angles = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[angles.sin()?, angles.cos()?], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_named() {
        let make = || {
            let mut pb = ParamBuilder::new(DType::F64, 3);
            Linear::new(&mut pb, "fc", 3, 2, true).unwrap();
            pb.finish()
        };
        let a = make();
        let b = make();
        assert_eq!(a.names(), vec!["fc.bias".to_string(), "fc.weight".to_string()]);
        assert_eq!(a.export().unwrap(), b.export().unwrap());
        assert!(a.squared_distance(&b).unwrap() == 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut pb = ParamBuilder::new(DType::F32, 0);
        pb.constant("x", &[1], 0.0).unwrap();
        assert!(pb.constant("x", &[1], 0.0).is_err());
    }

    #[test]
    fn linear_matches_manual() {
        let mut pb = ParamBuilder::new(DType::F64, 1);
        let lin = Linear::new(&mut pb, "l", 2, 1, false).unwrap();
        let w = to_f64_vec(lin.weight.as_tensor()).unwrap();
        let x = from_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 2], DType::F64).unwrap();
        let y = to_f64_vec(&lin.forward(&x).unwrap()).unwrap();
        assert!((y[0] - (w[0] + 2.0 * w[1])).abs() < 1e-12);
        assert!((y[1] - (3.0 * w[0] + 4.0 * w[1])).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_do_not_influence_output() {
        let mut pb = ParamBuilder::new(DType::F64, 2);
        let attn = Attention::new(&mut pb, "a", 4, 2).unwrap();
        let vis = vec![vec![true, false], vec![true, true]];
        let bias = visibility_bias(&vis, DType::F64).unwrap();
        let x1 = from_f64(&(0..8).map(|i| i as f64 * 0.1).collect::<Vec<_>>(), &[1, 2, 4], DType::F64).unwrap();
        let mut alt: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        for v in alt[4..].iter_mut() {
            *v += 3.0;
        }
        let x2 = from_f64(&alt, &[1, 2, 4], DType::F64).unwrap();
        let o1 = to_f64_vec(&attn.forward(&x1, &x1, Some(&bias)).unwrap()).unwrap();
        let o2 = to_f64_vec(&attn.forward(&x1, &x2, Some(&bias)).unwrap()).unwrap();
        // row 0 sees only key 0, which is identical in both inputs
        for i in 0..4 {
            assert!((o1[i] - o2[i]).abs() < 1e-12);
        }
        assert!((4..8).any(|i| (o1[i] - o2[i]).abs() > 1e-6));
    }
}

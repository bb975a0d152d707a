use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::perceptual::PerceptualPyramid;
use super::{LossBreakdown, LossWeights};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{patch_batch, Encoder, EncoderConfig};
use crate::error::{AlamError, Result};
use crate::nn::{from_f32, scalar, to_f64_vec, ParamStore, Precision};
use crate::quantizer::{quantize_batch, straight_through, Codebook, QuantizerConfig};
use crate::rng::{child_rng, derive_seed};
use crate::synthworld::{Frame, CHANNELS};

/// Everything needed to rebuild an encoder/quantizer/decoder stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub resolution: usize,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub decoder: DecoderConfig,
    pub precision: Precision,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            encoder: EncoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            decoder: DecoderConfig::default(),
            precision: Precision::F32,
        }
    }
}

/// What the decoder receives in place of the latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderInput {
    /// `z + sg(z_q - z)`.
    StraightThrough,
    /// `sg(z_q)`: no reconstruction gradient reaches the encoder head.
    Quantized,
    /// The continuous latent, bypassing the codebook.
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub vq_include_reverse: bool,
    pub decoder_input: DecoderInput,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { weights: LossWeights::default(), vq_include_reverse: true, decoder_input: DecoderInput::StraightThrough }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchLayout {
    /// `B` triplets; rows are `[ab; bc; ac; ba]`, each block `B` long.
    Triplets(usize),
    /// `N` independent forward pairs.
    Pairs(usize),
}

/// Raw patches and decoding targets for one optimisation step.
pub struct TrainBatch {
    pub layout: BatchLayout,
    pub src: Tensor,
    pub tgt: Tensor,
    /// `(n_decoded, H, W, C)` target pixels.
    pub targets: Tensor,
}

fn pixels(frames: &[&Frame], dtype: DType) -> Result<Tensor> {
    let f0 = frames.first().ok_or_else(|| AlamError::invalid("empty batch"))?;
    let flat: Vec<f32> = frames.iter().flat_map(|f| f.pixels.iter().copied()).collect();
    from_f32(&flat, &[frames.len(), f0.height, f0.width, CHANNELS], dtype)
}

impl TrainBatch {
    pub fn from_triplets(items: &[[&Frame; 3]], patch: usize, dtype: DType) -> Result<Self> {
        let b = items.len();
        let col = |i: usize| items.iter().map(move |t| t[i]);
        let src: Vec<&Frame> = col(0).chain(col(1)).chain(col(0)).chain(col(1)).collect();
        let tgt: Vec<&Frame> = col(1).chain(col(2)).chain(col(2)).chain(col(0)).collect();
        Ok(Self {
            layout: BatchLayout::Triplets(b),
            src: patch_batch(&src, patch, dtype)?,
            tgt: patch_batch(&tgt, patch, dtype)?,
            targets: pixels(&tgt[..3 * b], dtype)?,
        })
    }

    pub fn from_pairs(items: &[(&Frame, &Frame)], patch: usize, dtype: DType) -> Result<Self> {
        let src: Vec<&Frame> = items.iter().map(|p| p.0).collect();
        let tgt: Vec<&Frame> = items.iter().map(|p| p.1).collect();
        Ok(Self {
            layout: BatchLayout::Pairs(items.len()),
            src: patch_batch(&src, patch, dtype)?,
            tgt: patch_batch(&tgt, patch, dtype)?,
            targets: pixels(&tgt, dtype)?,
        })
    }

    /// Pair batch made of the three forward pairs of each triplet, in the
    /// same row order a triplet batch uses for them.
    pub fn forward_legs(items: &[[&Frame; 3]], patch: usize, dtype: DType) -> Result<Self> {
        let legs = [(0, 1), (1, 2), (0, 2)];
        let pairs: Vec<(&Frame, &Frame)> =
            legs.iter().flat_map(|&(i, j)| items.iter().map(move |t| (t[i], t[j]))).collect();
        Self::from_pairs(&pairs, patch, dtype)
    }

    pub fn rows(&self) -> usize {
        match self.layout {
            BatchLayout::Triplets(b) => 4 * b,
            BatchLayout::Pairs(n) => n,
        }
    }

    pub fn decoded_rows(&self) -> usize {
        match self.layout {
            BatchLayout::Triplets(b) => 3 * b,
            BatchLayout::Pairs(n) => n,
        }
    }

    pub fn quantized_rows(&self, include_reverse: bool) -> usize {
        match self.layout {
            BatchLayout::Triplets(b) if !include_reverse => 3 * b,
            _ => self.rows(),
        }
    }
}

/// Scalar loss tensors, still attached to the autograd graph.
pub struct LossTerms {
    pub l_vq: Tensor,
    pub l_rec: Tensor,
    pub l_perc: Tensor,
    pub l_add: Tensor,
    pub l_rev: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        match name {
            "l_vq" => Some(&self.l_vq),
            "l_rec" => Some(&self.l_rec),
            "l_perc" => Some(&self.l_perc),
            "l_add" => Some(&self.l_add),
            "l_rev" => Some(&self.l_rev),
            "total" => Some(&self.total),
            _ => None,
        }
    }
}

pub struct ForwardOutput {
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    /// Continuous latents of the quantised rows, with their code indices.
    pub vq_latents: Vec<Vec<f64>>,
    pub indices: Vec<usize>,
    /// All continuous latents `(rows, D_z)`.
    pub latents: Tensor,
    pub reconstructions: Tensor,
}

/// Encoder, decoder and codebook trained together.
#[derive(Clone, Debug)]
pub struct AlamModel {
    pub spec: ModelSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
    /// Set once the codebook has been seeded from encoder outputs.
    pub codebook_ready: bool,
    /// Encoder and decoder parameters.
    pub params: ParamStore,
    pub perceptual: PerceptualPyramid,
}

impl AlamModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let dtype = spec.precision.dtype();
        let (encoder, mut params) = Encoder::new(&spec.encoder, spec.resolution, dtype, derive_seed(seed, "encoder"))?;
        let (decoder, dparams) = Decoder::new(&spec.decoder, &encoder, dtype, derive_seed(seed, "decoder"))?;
        params.extend(&dparams)?;
        let codebook = Codebook::random(&spec.quantizer, spec.encoder.latent_dim, &mut child_rng(seed, "codebook"))?;
        Ok(Self {
            spec: spec.clone(),
            encoder,
            decoder,
            codebook,
            codebook_ready: false,
            params,
            perceptual: PerceptualPyramid::new(dtype)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.spec.precision.dtype()
    }

    pub fn default_decoder_input(&self) -> DecoderInput {
        if self.spec.quantizer.straight_through {
            DecoderInput::StraightThrough
        } else {
            DecoderInput::Quantized
        }
    }

    /// Names of encoder parameters only.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().into_iter().filter(|n| n.starts_with("encoder.")).collect()
    }

    /// Full forward pass using the current codebook.
    pub fn forward(&self, batch: &TrainBatch, opts: &LossOptions) -> Result<ForwardOutput> {
        let entries = self.codebook.entries_tensor(self.dtype())?;
        self.forward_with_entries(batch, &entries, opts)
    }

    /// Forward pass against an explicit entry tensor (used to probe gradients
    /// with respect to the codebook).
    pub fn forward_with_entries(&self, batch: &TrainBatch, entries: &Tensor, opts: &LossOptions) -> Result<ForwardOutput> {
        let out = self.encoder.forward_raw(&batch.src, &batch.tgt)?;
        let z = out.latents;
        let n_dec = batch.decoded_rows();
        let n_vq = batch.quantized_rows(opts.vq_include_reverse);

        let q = quantize_batch(&z.narrow(0, 0, n_vq)?, entries)?;
        let l_vq = q.commit.mean_all()?;

        let z_fwd = z.narrow(0, 0, n_dec)?;
        let zq_fwd = q.z_q.narrow(0, 0, n_dec)?;
        let dec_in = match opts.decoder_input {
            DecoderInput::StraightThrough => straight_through(&z_fwd, &zq_fwd)?,
            DecoderInput::Quantized => zq_fwd,
            DecoderInput::Continuous => z_fwd,
        };
        let np = self.encoder.patches_per_frame();
        let src_tokens = out.patches.narrow(0, 0, n_dec)?.narrow(1, 0, np)?;
        let recon = self.decoder.decode(&dec_in, &src_tokens)?;
        let l_rec = (&recon - &batch.targets)?.sqr()?.mean_all()?;
        let l_perc = self.perceptual.distance(&recon, &batch.targets)?.mean_all()?;

        let (l_add, l_rev) = match batch.layout {
            BatchLayout::Triplets(b) => {
                let z_ab = z.narrow(0, 0, b)?;
                let z_bc = z.narrow(0, b, b)?;
                let z_ac = z.narrow(0, 2 * b, b)?;
                let z_ba = z.narrow(0, 3 * b, b)?;
                let add = ((z_ac - &z_ab)? - z_bc)?.sqr()?.sum(1)?.mean_all()?;
                let rev = (z_ab + z_ba)?.sqr()?.sum(1)?.mean_all()?;
                (add, rev)
            }
            BatchLayout::Pairs(_) => {
                let zero = Tensor::zeros((), z.dtype(), z.device())?;
                (zero.clone(), zero)
            }
        };

        let w = opts.weights;
        let mut total = Tensor::zeros((), z.dtype(), z.device())?;
        for (weight, term) in [(w.vq, &l_vq), (w.rec, &l_rec), (w.perc, &l_perc), (w.add, &l_add), (w.rev, &l_rev)] {
            if weight != 0.0 {
                total = (total + (term * weight)?)?;
            }
        }
        let breakdown = LossBreakdown::new(
            [scalar(&l_vq)?, scalar(&l_rec)?, scalar(&l_perc)?, scalar(&l_add)?, scalar(&l_rev)?],
            w,
        )?;
        let dz = self.encoder.latent_dim();
        let vq_latents =
            to_f64_vec(&z.narrow(0, 0, n_vq)?.detach())?.chunks_exact(dz).map(|r| r.to_vec()).collect();
        Ok(ForwardOutput {
            terms: LossTerms { l_vq, l_rec, l_perc, l_add, l_rev, total },
            breakdown,
            vq_latents,
            indices: q.indices,
            latents: z,
            reconstructions: recon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Readout;
    use crate::synthworld::{sample_trajectory, View, WorldConfig};
    use candle_core::Var;

    pub(crate) fn tiny_spec(precision: Precision) -> ModelSpec {
        ModelSpec {
            resolution: 16,
            encoder: EncoderConfig {
                patch_size: 4,
                hidden: 16,
                layers: 1,
                heads: 2,
                queries: 2,
                latent_dim: 4,
                mlp_ratio: 2,
                readout: Readout::Mean,
            },
            quantizer: QuantizerConfig { codebook_size: 3, ..Default::default() },
            decoder: DecoderConfig { hidden: 16, blocks: 1, heads: 2, latent_tokens: 2, mlp_ratio: 2 },
            precision,
        }
    }

    fn frames() -> Vec<Frame> {
        let wc = WorldConfig { resolution: 16, ..Default::default() };
        sample_trajectory(9, 12, &wc).unwrap().frames(View::Global).to_vec()
    }

    fn triplets(f: &[Frame]) -> Vec<[&Frame; 3]> {
        vec![[&f[0], &f[2], &f[5]], [&f[3], &f[4], &f[9]]]
    }

    #[test]
    fn ablated_alam_on_forward_legs_matches_lam() {
        let model = AlamModel::new(&tiny_spec(Precision::F64), 3).unwrap();
        let f = frames();
        let t = triplets(&f);
        let w0 = LossWeights { add: 0.0, rev: 0.0, ..Default::default() };
        let opts = LossOptions { weights: w0, vq_include_reverse: false, ..Default::default() };
        let alam = model.forward(&TrainBatch::from_triplets(&t, 4, DType::F64).unwrap(), &opts).unwrap();
        let lam = model.forward(&TrainBatch::forward_legs(&t, 4, DType::F64).unwrap(), &opts).unwrap();
        let (a, b) = (alam.breakdown, lam.breakdown);
        for (x, y) in a.components()[..3].iter().zip(&b.components()[..3]) {
            assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
        }
        assert!((a.total - b.total).abs() < 1e-6);
        assert!(alam.breakdown.l_add > 0.0);
    }

    #[test]
    fn regularisers_and_commitment_give_no_codebook_gradient() {
        let model = AlamModel::new(&tiny_spec(Precision::F64), 4).unwrap();
        let f = frames();
        let batch = TrainBatch::from_triplets(&triplets(&f), 4, DType::F64).unwrap();
        let entries = Var::from_tensor(&model.codebook.entries_tensor(DType::F64).unwrap()).unwrap();
        let out = model.forward_with_entries(&batch, entries.as_tensor(), &LossOptions::default()).unwrap();
        let reg = (&out.terms.l_add + &out.terms.l_rev).unwrap();
        for t in [&reg, &out.terms.l_vq] {
            let g = t.backward().unwrap();
            if let Some(g) = g.get(entries.as_tensor()) {
                assert!(to_f64_vec(g).unwrap().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn straight_through_forward_uses_codes() {
        let model = AlamModel::new(&tiny_spec(Precision::F64), 5).unwrap();
        let f = frames();
        let batch = TrainBatch::from_pairs(&[(&f[0], &f[1])], 4, DType::F64).unwrap();
        let st = model.forward(&batch, &LossOptions::default()).unwrap();
        let q = LossOptions { decoder_input: DecoderInput::Quantized, ..Default::default() };
        let hard = model.forward(&batch, &q).unwrap();
        assert_eq!(to_f64_vec(&st.reconstructions).unwrap(), to_f64_vec(&hard.reconstructions).unwrap());
    }
}

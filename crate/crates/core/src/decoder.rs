//! Conditioned pixel decoder.
//!
//! The latent is lifted to a few latent tokens, the source frame's embedded
//! patches are re-projected, and a stack of blocks alternates self-attention
//! over patches with cross-attention into the latent tokens. A per-token
//! linear map produces pixel patches that are reassembled and squashed with a
//! logistic sigmoid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoder::{patch_batch, Encoder};
use crate::error::{AlamError, Result};
use crate::nn::{ensure_finite, from_f64, to_f64_vec, CrossBlock, LayerNorm, Linear, ParamBuilder, ParamStore};
use crate::synthworld::{Frame, View, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub latent_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 128, blocks: 4, heads: 4, latent_tokens: 4, mlp_ratio: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    latent_dim: usize,
    patch: usize,
    resolution: usize,
    latent_head: Linear,
    patch_head: Linear,
    blocks: Vec<CrossBlock>,
    norm: LayerNorm,
    pixel_head: Linear,
    dtype: DType,
}

impl Decoder {
    pub fn new(
        config: &DecoderConfig,
        encoder: &Encoder,
        dtype: DType,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        if config.latent_tokens == 0 {
            return Err(AlamError::invalid("decoder needs at least one latent token"));
        }
        let d = config.hidden;
        let p = encoder.config.patch_size;
        let mut pb = ParamBuilder::new(dtype, seed);
        let latent_head = Linear::new(&mut pb, "decoder.latent_head", encoder.latent_dim(), config.latent_tokens * d, true)?;
        let patch_head = Linear::new(&mut pb, "decoder.patch_head", encoder.config.hidden, d, true)?;
        let blocks = (0..config.blocks)
            .map(|i| CrossBlock::new(&mut pb, &format!("decoder.block{i}"), d, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut pb, "decoder.norm", d)?;
        let pixel_head = Linear::new(&mut pb, "decoder.pixel_head", d, p * p * CHANNELS, true)?;
        let dec = Self {
            config: config.clone(),
            latent_dim: encoder.latent_dim(),
            patch: p,
            resolution: encoder.resolution(),
            latent_head,
            patch_head,
            blocks,
            norm,
            pixel_head,
            dtype,
        };
        Ok((dec, pb.finish()))
    }

    /// `latent: (B, D_z)`, `source_patches: (B, Np, d_enc)` -> `(B, H, W, C)`.
    pub fn decode(&self, latent: &Tensor, source_patches: &Tensor) -> Result<Tensor> {
        let (b, dz) = latent.dims2()?;
        if dz != self.latent_dim {
            return Err(AlamError::invalid(format!("latent dim {dz} != {}", self.latent_dim)));
        }
        let d = self.config.hidden;
        let memory = self.latent_head.forward(latent)?.reshape((b, self.config.latent_tokens, d))?;
        let mut x = self.patch_head.forward(source_patches)?;
        for block in &self.blocks {
            x = block.forward(&x, &memory)?;
        }
        let pix = self.pixel_head.forward(&self.norm.forward(&x)?)?;
        let g = self.resolution / self.patch;
        let p = self.patch;
        let img = pix
            .reshape((b, g, g, p, p * CHANNELS))?
            .transpose(2, 3)?
            .reshape((b, self.resolution, self.resolution, CHANNELS))?;
        let out = candle_nn::ops::sigmoid(&img)?;
        ensure_finite(&out, "decoder activations")?;
        Ok(out)
    }

    /// Same computation as [`Decoder::decode`]; the entry point used when the
    /// latent is a sum of short-horizon latents rather than a single one.
    pub fn decode_composed(&self, latent_sum: &Tensor, source_patches: &Tensor) -> Result<Tensor> {
        self.decode(latent_sum, source_patches)
    }

    /// Decodes frames from plain latents and source frames.
    pub fn decode_frames(&self, encoder: &Encoder, latents: &[Vec<f64>], sources: &[&Frame]) -> Result<Vec<Frame>> {
        if latents.len() != sources.len() {
            return Err(AlamError::invalid("latent and source batches differ in length"));
        }
        let mut out = Vec::with_capacity(latents.len());
        const CHUNK: usize = 64;
        for (zs, srcs) in latents.chunks(CHUNK).zip(sources.chunks(CHUNK)) {
            let flat: Vec<f64> = zs.iter().flatten().copied().collect();
            let z = from_f64(&flat, &[zs.len(), self.latent_dim], self.dtype)?;
            let raw = patch_batch(srcs, self.patch, self.dtype)?;
            let src = encoder.embed_slot(&raw, 0)?;
            let img = to_f64_vec(&self.decode(&z, &src)?.detach())?;
            let per = self.resolution * self.resolution * CHANNELS;
            for (chunk, s) in img.chunks_exact(per).zip(srcs) {
                out.push(Frame {
                    height: self.resolution,
                    width: self.resolution,
                    view: s.view,
                    pixels: chunk.iter().map(|&v| v as f32).collect(),
                });
            }
        }
        Ok(out)
    }
}

/// Converts a `(B, H, W, C)` tensor back into frames.
pub fn tensor_to_frames(t: &Tensor, view: View) -> Result<Vec<Frame>> {
    let (b, h, w, c) = t.dims4()?;
    let data = to_f64_vec(&t.detach())?;
    Ok((0..b)
        .map(|i| Frame {
            height: h,
            width: w,
            view,
            pixels: data[i * h * w * c..(i + 1) * h * w * c].iter().map(|&v| v as f32).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::nn::scalar;
    use crate::synthworld::{sample_trajectory, WorldConfig};
    use candle_core::Var;

    fn setup(dtype: DType) -> (Encoder, Decoder, Vec<Frame>) {
        let ecfg = EncoderConfig { patch_size: 4, hidden: 16, layers: 1, heads: 2, queries: 2, latent_dim: 4, ..Default::default() };
        let (enc, _) = Encoder::new(&ecfg, 16, dtype, 0).unwrap();
        let dcfg = DecoderConfig { hidden: 16, blocks: 1, heads: 2, latent_tokens: 2, mlp_ratio: 2 };
        let (dec, _) = Decoder::new(&dcfg, &enc, dtype, 1).unwrap();
        let wc = WorldConfig { resolution: 16, ..Default::default() };
        let frames = sample_trajectory(3, 4, &wc).unwrap().frames(View::Global).to_vec();
        (enc, dec, frames)
    }

    #[test]
    fn shape_range_and_determinism() {
        let (enc, dec, f) = setup(DType::F32);
        let z = vec![vec![5.0, -40.0, 0.3, 1e3], vec![0.0; 4]];
        let a = dec.decode_frames(&enc, &z, &[&f[0], &f[1]]).unwrap();
        let b = dec.decode_frames(&enc, &z, &[&f[0], &f[1]]).unwrap();
        assert_eq!(a, b);
        assert_eq!((a[0].height, a[0].width, a[0].pixels.len()), (16, 16, 16 * 16 * 3));
        assert!(a.iter().flat_map(|f| &f.pixels).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn composed_entry_point_is_same_path() {
        let (enc, dec, f) = setup(DType::F64);
        let raw = patch_batch(&[&f[0]], 4, DType::F64).unwrap();
        let src = enc.embed_slot(&raw, 0).unwrap();
        let z = from_f64(&[0.1, 0.2, -0.3, 0.4], &[1, 4], DType::F64).unwrap();
        let a = to_f64_vec(&dec.decode(&z, &src).unwrap()).unwrap();
        let b = to_f64_vec(&dec.decode_composed(&z, &src).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_depends_on_source() {
        let (enc, dec, f) = setup(DType::F64);
        let raw = patch_batch(&[&f[0]], 4, DType::F64).unwrap();
        let src = Var::from_tensor(&enc.embed_slot(&raw, 0).unwrap().detach()).unwrap();
        let z = from_f64(&[0.1, 0.2, -0.3, 0.4], &[1, 4], DType::F64).unwrap();
        let out = dec.decode(&z, src.as_tensor()).unwrap();
        let g = out.sum_all().unwrap().backward().unwrap();
        let jac = g.get(src.as_tensor()).unwrap();
        assert!(scalar(&jac.sqr().unwrap().sum_all().unwrap()).unwrap() > 1e-12);
    }
}

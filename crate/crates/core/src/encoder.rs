//! Relational transition encoder.
//!
//! An ordered frame pair is cut into non-overlapping patches, linearly
//! embedded with learned (frame-slot, row, col) position vectors, prefixed by
//! learnable query tokens and processed by a full self-attention transformer.
//! The query outputs are pooled and projected to the latent transition.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::nn::{ensure_finite, from_f32, to_f64_vec, Block, LayerNorm, Linear, ParamBuilder, ParamStore};
use crate::synthworld::{Frame, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Mean over query outputs, then the linear head.
    Mean,
    /// Concatenate query outputs, then the linear head.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub latent_dim: usize,
    pub mlp_ratio: usize,
    pub readout: Readout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 8, hidden: 128, layers: 4, heads: 4, queries: 8, latent_dim: 32, mlp_ratio: 4, readout: Readout::Mean }
    }
}

/// Position tag of one patch token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchTag {
    pub slot: usize,
    pub row: usize,
    pub col: usize,
}

/// Embedded patch tokens of a frame pair: `tokens` is `(2 * Np, d)`.
#[derive(Clone, Debug)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub tags: Vec<PatchTag>,
}

pub struct EncoderOutput {
    /// `(B, latent_dim)` continuous latents.
    pub latents: Tensor,
    /// `(B, 2 * Np, hidden)` embedded patch tokens, source frame first.
    pub patches: Tensor,
}

/// Cuts an HWC frame into row-major `P x P` patches, each flattened in
/// `(py, px, channel)` order.
pub fn raw_patches(frame: &Frame, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || frame.height % patch != 0 || frame.width % patch != 0 {
        return Err(AlamError::invalid(format!(
            "frame {}x{} is not divisible by patch size {patch}",
            frame.height, frame.width
        )));
    }
    let (gh, gw) = (frame.height / patch, frame.width / patch);
    let mut out = Vec::with_capacity(frame.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for py in 0..patch {
                let row = pr * patch + py;
                let start = (row * frame.width + pc * patch) * CHANNELS;
                out.extend_from_slice(&frame.pixels[start..start + patch * CHANNELS]);
            }
        }
    }
    Ok(out)
}

/// Stacks raw patches of many frames into `(B, Np, P*P*C)`.
pub fn patch_batch(frames: &[&Frame], patch: usize, dtype: DType) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| AlamError::invalid("empty frame batch"))?;
    let np = (first.height / patch.max(1)) * (first.width / patch.max(1));
    let mut data = Vec::with_capacity(frames.len() * first.len());
    for f in frames {
        if !f.same_shape(first) {
            return Err(AlamError::invalid("ragged batch: frames differ in resolution"));
        }
        data.extend(raw_patches(f, patch)?);
    }
    from_f32(&data, &[frames.len(), np, patch * patch * CHANNELS], dtype)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    resolution: usize,
    patch_embed: Linear,
    position: candle_core::Var,
    queries: candle_core::Var,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    dtype: DType,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, resolution: usize, dtype: DType, seed: u64) -> Result<(Self, ParamStore)> {
        let p = config.patch_size;
        if p == 0 || resolution % p != 0 {
            return Err(AlamError::invalid(format!("resolution {resolution} is not divisible by patch size {p}")));
        }
        if config.queries == 0 || config.layers == 0 {
            return Err(AlamError::invalid("encoder needs at least one query and one layer"));
        }
        let np = (resolution / p) * (resolution / p);
        let d = config.hidden;
        let mut pb = ParamBuilder::new(dtype, seed);
        let patch_embed = Linear::new(&mut pb, "encoder.patch_embed", p * p * CHANNELS, d, true)?;
        let position = pb.normal("encoder.position", &[2 * np, d], 0.02)?;
        let queries = pb.normal("encoder.queries", &[config.queries, d], 0.02)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut pb, &format!("encoder.block{i}"), d, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut pb, "encoder.norm", d)?;
        let head_in = match config.readout {
            Readout::Mean => d,
            Readout::Concat => d * config.queries,
        };
        let head = Linear::new(&mut pb, "encoder.head", head_in, config.latent_dim, true)?;
        let enc = Self { config: config.clone(), resolution, patch_embed, position, queries, blocks, norm, head, dtype };
        Ok((enc, pb.finish()))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn patches_per_frame(&self) -> usize {
        let g = self.resolution / self.config.patch_size;
        g * g
    }

    /// Embeds raw patches `(B, Np, P*P*C)` of one frame slot.
    pub fn embed_slot(&self, raw: &Tensor, slot: usize) -> Result<Tensor> {
        let np = self.patches_per_frame();
        let pos = self.position.as_tensor().narrow(0, slot * np, np)?;
        Ok(self.patch_embed.forward(raw)?.broadcast_add(&pos)?)
    }

    pub fn tags(&self) -> Vec<PatchTag> {
        let g = self.resolution / self.config.patch_size;
        (0..2)
            .flat_map(|slot| (0..g).flat_map(move |row| (0..g).map(move |col| PatchTag { slot, row, col })))
            .collect()
    }

    /// Embedded patch tokens of a single pair, source frame first.
    pub fn patchify(&self, frame_i: &Frame, frame_j: &Frame) -> Result<PatchTokens> {
        self.check_frame(frame_i)?;
        self.check_frame(frame_j)?;
        let p = self.config.patch_size;
        let src = patch_batch(&[frame_i], p, self.dtype)?;
        let tgt = patch_batch(&[frame_j], p, self.dtype)?;
        let tokens = Tensor::cat(&[self.embed_slot(&src, 0)?, self.embed_slot(&tgt, 1)?], 1)?.squeeze(0)?;
        Ok(PatchTokens { tokens, tags: self.tags() })
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        if f.height != self.resolution || f.width != self.resolution {
            return Err(AlamError::invalid(format!(
                "frame {}x{} does not match encoder resolution {}",
                f.height, f.width, self.resolution
            )));
        }
        Ok(())
    }

    /// Encodes a batch given raw source/target patches `(B, Np, P*P*C)`.
    pub fn forward_raw(&self, src: &Tensor, tgt: &Tensor) -> Result<EncoderOutput> {
        let patches = Tensor::cat(&[self.embed_slot(src, 0)?, self.embed_slot(tgt, 1)?], 1)?;
        let b = patches.dim(0)?;
        let (kq, d) = (self.config.queries, self.config.hidden);
        let queries = self.queries.as_tensor().unsqueeze(0)?.broadcast_as((b, kq, d))?;
        let mut x = Tensor::cat(&[&queries, &patches], 1)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let x = self.norm.forward(&x)?;
        let query_out = x.narrow(1, 0, kq)?;
        let pooled = match self.config.readout {
            Readout::Mean => query_out.mean(1)?,
            Readout::Concat => query_out.reshape((b, kq * d))?,
        };
        let latents = self.head.forward(&pooled)?;
        ensure_finite(&latents, "encoder activations")?;
        Ok(EncoderOutput { latents, patches })
    }

    /// Encodes a batch of ordered pairs to a `(B, latent_dim)` tensor.
    pub fn encode_pairs_tensor(&self, pairs: &[(&Frame, &Frame)]) -> Result<Tensor> {
        for (a, b) in pairs {
            self.check_frame(a)?;
            self.check_frame(b)?;
        }
        let p = self.config.patch_size;
        let src: Vec<&Frame> = pairs.iter().map(|(a, _)| *a).collect();
        let tgt: Vec<&Frame> = pairs.iter().map(|(_, b)| *b).collect();
        let out = self.forward_raw(&patch_batch(&src, p, self.dtype)?, &patch_batch(&tgt, p, self.dtype)?)?;
        Ok(out.latents)
    }

    /// Encodes pairs in chunks without building a gradient graph worth keeping.
    pub fn encode_batch(&self, pairs: &[(&Frame, &Frame)]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let dz = self.config.latent_dim;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(CHUNK) {
            let z = to_f64_vec(&self.encode_pairs_tensor(chunk)?.detach())?;
            out.extend(z.chunks_exact(dz).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn encode_transition(&self, frame_i: &Frame, frame_j: &Frame) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[(frame_i, frame_j)])?.remove(0))
    }
}

//! Transformer trunk over `[context ; interleaved tokens]` with
//! per-modality input and output maps.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::sequence::{layout, mask_for, Modality};
use crate::error::{AlamError, Result};
use crate::nn::{from_f64, sinusoidal_features, visibility_bias, Block, LayerNorm, Linear, ParamBuilder};
use crate::synthworld::{render_view, Frame, View, WorldConfig, WorldState, CHANNELS};

/// Action and projected-latent token width.
pub const TOKEN_DIM: usize = 2;
const TAU_FREQS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Side of the average-pooled frame grid fed to the context tokens.
    pub pool: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 3, heads: 4, mlp_ratio: 2, pool: 8 }
    }
}

/// Number of base context tokens: two views, goal, proprioception.
pub const BASE_CONTEXT: usize = 4;

pub fn context_width(pool: usize) -> usize {
    2 * pool * pool * CHANNELS + 4
}

/// Block-average pooling to a `pool x pool` grid (bins may differ by one
/// pixel when the side is not divisible).
pub fn pool_frame(frame: &Frame, pool: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; pool * pool * CHANNELS];
    let mut cnt = vec![0usize; pool * pool];
    for r in 0..frame.height {
        let br = r * pool / frame.height;
        for c in 0..frame.width {
            let bc = c * pool / frame.width;
            let cell = br * pool + bc;
            cnt[cell] += 1;
            for ch in 0..CHANNELS {
                acc[cell * CHANNELS + ch] += frame.at(r, c, ch) as f64;
            }
        }
    }
    acc.iter().enumerate().map(|(i, v)| (v / cnt[i / CHANNELS].max(1) as f64) as f32).collect()
}

/// Flat context vector: pooled global view, pooled wrist view, goal and
/// agent position mapped to `[-1, 1]`.
pub fn context_features(state: &WorldState, frames: [&Frame; 2], pool: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(context_width(pool));
    for f in frames {
        out.extend(pool_frame(f, pool));
    }
    out.extend(state.goal_pos.iter().map(|&p| (2.0 * p - 1.0) as f32));
    out.extend(state.agent_pos.iter().map(|&p| (2.0 * p - 1.0) as f32));
    out
}

/// Renders both views of `state` and builds its context vector.
pub fn context_from_state(state: &WorldState, world: &WorldConfig, pool: usize) -> Vec<f32> {
    let g = render_view(state, View::Global, world.resolution, world);
    let w = render_view(state, View::Wrist, world.resolution, world);
    context_features(state, [&g, &w], pool)
}

#[derive(Clone, Debug)]
pub struct SeqNet {
    config: NetConfig,
    modalities: Vec<Modality>,
    horizon: usize,
    extra_context: usize,
    ctx_views: [Linear; 2],
    ctx_goal: Linear,
    ctx_proprio: Linear,
    ctx_type: candle_core::Var,
    ctx_latent: Option<Linear>,
    inputs: Vec<Linear>,
    outputs: Vec<Linear>,
    modality_emb: candle_core::Var,
    time_emb: candle_core::Var,
    tau_in: Linear,
    tau_out: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dtype: DType,
}

impl SeqNet {
    /// `extra_context` latent tokens (of width [`TOKEN_DIM`]) can be appended
    /// to the context; they are laid out as `[th_1, wr_1, th_2, ...]`.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        config: &NetConfig,
        modalities: &[Modality],
        horizon: usize,
        extra_context: usize,
    ) -> Result<Self> {
        if horizon == 0 || modalities.is_empty() {
            return Err(AlamError::invalid("policy sequence needs a horizon and at least one modality"));
        }
        let d = config.hidden;
        let view_in = config.pool * config.pool * CHANNELS;
        let lin = |pb: &mut ParamBuilder, n: &str, i: usize, o: usize| Linear::new(pb, &format!("{name}.{n}"), i, o, true);
        let ctx_views = [lin(pb, "ctx_global", view_in, d)?, lin(pb, "ctx_wrist", view_in, d)?];
        let ctx_goal = lin(pb, "ctx_goal", 2, d)?;
        let ctx_proprio = lin(pb, "ctx_proprio", 2, d)?;
        let ctx_type = pb.normal(&format!("{name}.ctx_type"), &[BASE_CONTEXT + 2, d], 0.02)?;
        let ctx_latent = if extra_context > 0 { Some(lin(pb, "ctx_latent", TOKEN_DIM, d)?) } else { None };
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for m in modalities {
            let tag = format!("{m:?}").to_lowercase();
            inputs.push(lin(pb, &format!("in_{tag}"), TOKEN_DIM, d)?);
            outputs.push(Linear::with_std(pb, &format!("{name}.out_{tag}"), d, TOKEN_DIM, true, 0.02)?);
        }
        let modality_emb = pb.normal(&format!("{name}.modality_emb"), &[3, d], 0.02)?;
        let time_emb = pb.normal(&format!("{name}.time_emb"), &[horizon, d], 0.02)?;
        let tau_in = lin(pb, "tau_in", 2 * TAU_FREQS, d)?;
        let tau_out = lin(pb, "tau_out", d, d)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(pb, &format!("{name}.block{i}"), d, config.heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, &format!("{name}.norm"), d)?;
        Ok(Self {
            config: config.clone(),
            modalities: modalities.to_vec(),
            horizon,
            extra_context,
            ctx_views,
            ctx_goal,
            ctx_proprio,
            ctx_type,
            ctx_latent,
            inputs,
            outputs,
            modality_emb,
            time_emb,
            tau_in,
            tau_out,
            blocks,
            norm,
            dtype: pb.dtype(),
        })
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn n_context(&self) -> usize {
        BASE_CONTEXT + self.extra_context
    }

    /// Additive attention bias; `block_latents` hides latent columns from
    /// action rows.
    pub fn attention_bias(&self, block_latents: bool) -> Result<Tensor> {
        let tags = layout(self.horizon, &self.modalities);
        let vis = mask_for(&tags, self.n_context(), block_latents);
        visibility_bias(&vis, self.dtype)?.unsqueeze(0)?.unsqueeze(0).map_err(Into::into)
    }

    fn context_tokens(&self, ctx: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let b = ctx.dim(0)?;
        let p = self.config.pool * self.config.pool * CHANNELS;
        let g = self.ctx_views[0].forward(&ctx.narrow(1, 0, p)?)?;
        let w = self.ctx_views[1].forward(&ctx.narrow(1, p, p)?)?;
        let goal = self.ctx_goal.forward(&ctx.narrow(1, 2 * p, 2)?)?;
        let prop = self.ctx_proprio.forward(&ctx.narrow(1, 2 * p + 2, 2)?)?;
        let base = Tensor::stack(&[g, w, goal, prop], 1)?;
        let types = self.ctx_type.as_tensor();
        let base = base.broadcast_add(&types.narrow(0, 0, BASE_CONTEXT)?.unsqueeze(0)?)?;
        match (extra, &self.ctx_latent) {
            (None, None) => Ok(base),
            (Some(z), Some(lin)) => {
                let (zb, n, _) = z.dims3()?;
                if zb != b || n != self.extra_context {
                    return Err(AlamError::invalid("extra context has the wrong shape"));
                }
                let h = n / 2;
                let d = self.config.hidden;
                let e = lin.forward(z)?.reshape((b, h, 2, d))?;
                let kinds = types.narrow(0, BASE_CONTEXT, 2)?.reshape((1, 1, 2, d))?;
                let times = self.time_emb.as_tensor().narrow(0, 0, h)?.reshape((1, h, 1, d))?;
                let e = e.broadcast_add(&kinds)?.broadcast_add(&times)?.reshape((b, n, d))?;
                Ok(Tensor::cat(&[base, e], 1)?)
            }
            _ => Err(AlamError::invalid("extra context does not match the network layout")),
        }
    }

    /// `ctx: (B, F)`, `x`: one `(B, H, TOKEN_DIM)` tensor per modality,
    /// `time: (B,)` scalar conditioning (flow time or diffusion step).
    /// Returns one `(B, H, TOKEN_DIM)` output per modality.
    pub fn forward(&self, ctx: &Tensor, extra: Option<&Tensor>, x: &[Tensor], time: &Tensor, bias: &Tensor) -> Result<Vec<Tensor>> {
        if x.len() != self.modalities.len() {
            return Err(AlamError::invalid("one input tensor per modality is required"));
        }
        let b = ctx.dim(0)?;
        let (h, d, m) = (self.horizon, self.config.hidden, self.modalities.len());
        let t_emb = self.time_emb.as_tensor().unsqueeze(0)?;
        let mut streams = Vec::with_capacity(m);
        for ((xi, lin), modality) in x.iter().zip(&self.inputs).zip(&self.modalities) {
            let emb = self.modality_emb.as_tensor().narrow(0, modality.index(), 1)?.unsqueeze(0)?;
            streams.push(lin.forward(xi)?.broadcast_add(&t_emb)?.broadcast_add(&emb)?);
        }
        let seq = Tensor::stack(&streams, 2)?.reshape((b, h * m, d))?;
        let tau = self.tau_out.forward(&self.tau_in.forward(&sinusoidal_features(time, TAU_FREQS)?)?.silu()?)?;
        let seq = seq.broadcast_add(&tau.unsqueeze(1)?)?;
        let ctx_tok = self.context_tokens(ctx, extra)?;
        let n_ctx = ctx_tok.dim(1)?;
        let mut hcur = Tensor::cat(&[ctx_tok, seq], 1)?;
        for block in &self.blocks {
            hcur = block.forward(&hcur, Some(bias))?;
        }
        let out = self.norm.forward(&hcur.narrow(1, n_ctx, h * m)?)?.reshape((b, h, m, d))?;
        self.outputs
            .iter()
            .enumerate()
            .map(|(i, head)| head.forward(&out.narrow(2, i, 1)?.squeeze(2)?))
            .collect()
    }

    /// Convenience: a `(B,)` tensor filled with `value`.
    pub fn time_column(&self, b: usize, value: f64) -> Result<Tensor> {
        from_f64(&vec![value; b], &[b], self.dtype)
    }
}

//! Token layout and attention structure of the interleaved policy sequence.

use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Latent stream of the global (third-person) view.
    Th,
    /// Latent stream of the wrist view.
    Wr,
    U,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Th, Modality::Wr, Modality::U];

    pub fn index(self) -> usize {
        match self {
            Modality::Th => 0,
            Modality::Wr => 1,
            Modality::U => 2,
        }
    }

    pub fn is_latent(self) -> bool {
        self != Modality::U
    }
}

/// Timestep (0-based) and modality of one sequence token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTag {
    pub t: usize,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence<T> {
    pub tokens: Vec<T>,
    pub tags: Vec<TokenTag>,
}

/// Canonical per-timestep order `[th, wr, u]` for every timestep in `modalities`.
pub fn layout(horizon: usize, modalities: &[Modality]) -> Vec<TokenTag> {
    (0..horizon).flat_map(|t| modalities.iter().map(move |&modality| TokenTag { t, modality })).collect()
}

/// Interleaves three equally long streams as `[th_1, wr_1, u_1, th_2, ...]`.
pub fn build_interleaved<T: Clone>(y_th: &[T], y_wr: &[T], y_u: &[T]) -> Result<InterleavedSequence<T>> {
    let h = y_u.len();
    if y_th.len() != h || y_wr.len() != h {
        return Err(AlamError::invalid(format!(
            "stream lengths differ: th {}, wr {}, u {h}",
            y_th.len(),
            y_wr.len()
        )));
    }
    let tokens = (0..h).flat_map(|t| [y_th[t].clone(), y_wr[t].clone(), y_u[t].clone()]).collect();
    Ok(InterleavedSequence { tokens, tags: layout(h, &Modality::ALL) })
}

/// Visibility of the interleaved sequence after `n_ctx` context tokens.
/// `visible[row][col]` is true when `row` may attend to `col`.
///
/// Context tokens see only context. A latent token at `t` sees the context
/// and every latent token at timesteps `<= t`. An action token at `t` sees
/// the context, every token at earlier timesteps, both latents at `t`, and
/// itself.
pub fn build_attn_mask(horizon: usize, n_ctx: usize) -> Vec<Vec<bool>> {
    mask_for(&layout(horizon, &Modality::ALL), n_ctx, false)
}

/// Mask for an arbitrary tag list. With `block_latents`, action rows lose
/// visibility of every latent column.
pub fn mask_for(tags: &[TokenTag], n_ctx: usize, block_latents: bool) -> Vec<Vec<bool>> {
    let n = n_ctx + tags.len();
    let mut m = vec![vec![false; n]; n];
    for row in m.iter_mut() {
        row[..n_ctx].iter_mut().for_each(|v| *v = true);
    }
    for (i, ti) in tags.iter().enumerate() {
        for (j, tj) in tags.iter().enumerate() {
            let see = match (ti.modality.is_latent(), tj.modality.is_latent()) {
                (true, true) => tj.t <= ti.t,
                (true, false) => false,
                (false, true) => tj.t <= ti.t && !block_latents,
                (false, false) => tj.t <= ti.t,
            };
            m[n_ctx + i][n_ctx + j] = see;
        }
    }
    m
}

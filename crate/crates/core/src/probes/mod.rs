//! Algebraic probes of a frozen transition encoder.
//!
//! For anchors `a` on held-out episodes and horizons `t*k` the suite compares
//! the direct latent `z(a, a+tk)` with the chained sum of `t` stride-`k`
//! latents, measures how far `z(a+tk, a)` is from `-z(a, a+tk)`, and decodes
//! both the direct and the chained latent against the true target frame.

mod metrics;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::pretrain::{perceptual_distance, AlamModel};
use crate::rng::rng_from;
use crate::synthworld::{render_view, true_transition, write_png_row, Dataset, Frame, Trajectory, View, WorldConfig, WorldState};

pub use metrics::{mse, psnr, psnr_from_mse, ssim, PSNR_CAP_DB};

pub const PERCEPTUAL_LABEL: &str = "random-feature pyramid distance (LPIPS substitute)";

/// One frame of one view of a trajectory.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a> {
    pub traj: &'a Trajectory,
    pub view: View,
    pub index: usize,
}

impl<'a> FrameRef<'a> {
    pub fn new(traj: &'a Trajectory, view: View, index: usize) -> Self {
        Self { traj, view, index }
    }

    pub fn frame(&self) -> &'a Frame {
        &self.traj.frames(self.view)[self.index]
    }

    pub fn state(&self) -> &'a WorldState {
        &self.traj.states[self.index]
    }
}

pub trait TransitionEncoder {
    fn latent_dim(&self) -> usize;
    fn id(&self) -> String;
    fn encode(&self, pairs: &[(FrameRef<'_>, FrameRef<'_>)]) -> Result<Vec<Vec<f64>>>;
}

pub trait FrameDecoder {
    /// Reconstructs the target of each `(source, latent)` item.
    fn decode(&self, items: &[(FrameRef<'_>, &[f64])]) -> Result<Vec<Frame>>;
}

impl TransitionEncoder for AlamModel {
    fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    fn id(&self) -> String {
        format!("alam-encoder(d_z={})", self.encoder.latent_dim())
    }

    fn encode(&self, pairs: &[(FrameRef<'_>, FrameRef<'_>)]) -> Result<Vec<Vec<f64>>> {
        let frames: Vec<(&Frame, &Frame)> = pairs.iter().map(|(a, b)| (a.frame(), b.frame())).collect();
        self.encoder.encode_batch(&frames)
    }
}

impl FrameDecoder for AlamModel {
    fn decode(&self, items: &[(FrameRef<'_>, &[f64])]) -> Result<Vec<Frame>> {
        let latents: Vec<Vec<f64>> = items.iter().map(|(_, z)| z.to_vec()).collect();
        let sources: Vec<&Frame> = items.iter().map(|(s, _)| s.frame()).collect();
        self.decoder.decode_frames(&self.encoder, &latents, &sources)
    }
}

/// Ground-truth displacement encoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleEncoder;

impl TransitionEncoder for OracleEncoder {
    fn latent_dim(&self) -> usize {
        2
    }

    fn id(&self) -> String {
        "oracle-displacement".into()
    }

    fn encode(&self, pairs: &[(FrameRef<'_>, FrameRef<'_>)]) -> Result<Vec<Vec<f64>>> {
        Ok(pairs.iter().map(|(a, b)| true_transition(a.state(), b.state()).to_vec()).collect())
    }
}

/// Re-renders the source state with the agent moved by the latent.
#[derive(Clone, Debug)]
pub struct OracleDecoder {
    pub world: WorldConfig,
}

impl FrameDecoder for OracleDecoder {
    fn decode(&self, items: &[(FrameRef<'_>, &[f64])]) -> Result<Vec<Frame>> {
        items
            .iter()
            .map(|(src, z)| {
                if z.len() != 2 {
                    return Err(AlamError::invalid("oracle decoder expects 2-D displacements"));
                }
                let mut s = src.state().clone();
                s.agent_pos = [s.agent_pos[0] + z[0], s.agent_pos[1] + z[1]];
                Ok(render_view(&s, src.view, src.frame().height, &self.world))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNorm {
    #[default]
    L2,
    L1,
}

impl ErrorNorm {
    pub fn apply(self, v: impl Iterator<Item = f64>) -> f64 {
        match self {
            ErrorNorm::L2 => v.map(|x| x * x).sum::<f64>().sqrt(),
            ErrorNorm::L1 => v.map(f64::abs).sum(),
        }
    }
}

/// `||z_long - z_chain||`.
pub fn additivity_error(z_long: &[f64], z_chain: &[f64], norm: ErrorNorm) -> Result<f64> {
    if z_long.len() != z_chain.len() {
        return Err(AlamError::invalid("latent dimensions differ"));
    }
    Ok(norm.apply(z_long.iter().zip(z_chain).map(|(a, b)| a - b)))
}

/// `||z_fwd + z_bwd||`.
pub fn reversibility_error(z_fwd: &[f64], z_bwd: &[f64], norm: ErrorNorm) -> Result<f64> {
    if z_fwd.len() != z_bwd.len() {
        return Err(AlamError::invalid("latent dimensions differ"));
    }
    Ok(norm.apply(z_fwd.iter().zip(z_bwd).map(|(a, b)| a + b)))
}

/// Sums latents in order.
pub fn sum_latents(parts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = parts.first().ok_or_else(|| AlamError::invalid("nothing to sum"))?;
    let mut out = vec![0.0; first.len()];
    for p in parts {
        if p.len() != out.len() {
            return Err(AlamError::invalid("latent dimensions differ"));
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Ok(out)
}

/// Sum of the stride-`k` latents along `chain`, which must hold `t*k + 1`
/// consecutive frames for some `t >= 1`.
pub fn cumulative_latent(chain: &[FrameRef<'_>], k: usize, encoder: &dyn TransitionEncoder) -> Result<Vec<f64>> {
    if k == 0 || chain.len() < k + 1 || (chain.len() - 1) % k != 0 {
        return Err(AlamError::invalid(format!("chain of {} frames does not span whole strides of {k}", chain.len())));
    }
    let t = (chain.len() - 1) / k;
    let pairs: Vec<_> = (0..t).map(|i| (chain[i * k], chain[(i + 1) * k])).collect();
    sum_latents(&encoder.encode(&pairs)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonGrid {
    pub stride: usize,
    /// Horizon multiples `t`, ascending, starting at 1.
    pub multiples: Vec<usize>,
    /// Multiples covered by training gaps.
    pub supervised: Vec<usize>,
}

impl Default for HorizonGrid {
    fn default() -> Self {
        Self { stride: 5, multiples: vec![1, 2, 3, 4, 5], supervised: vec![1, 2] }
    }
}

impl HorizonGrid {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(AlamError::invalid("probe stride must be positive"));
        }
        if self.multiples.first() != Some(&1) || self.multiples.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AlamError::invalid("horizon multiples must ascend from 1"));
        }
        if self.supervised.iter().any(|s| !self.multiples.contains(s)) {
            return Err(AlamError::invalid("supervised horizons must be part of the grid"));
        }
        Ok(())
    }

    pub fn max_span(&self) -> usize {
        self.stride * self.multiples.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub grid: HorizonGrid,
    pub n_anchors: usize,
    pub norm: ErrorNorm,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { grid: HorizonGrid::default(), n_anchors: 256, norm: ErrorNorm::L2 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

impl RecMetrics {
    fn minus(self, base: RecMetrics) -> RecMetrics {
        RecMetrics { psnr: self.psnr - base.psnr, ssim: self.ssim - base.ssim, perceptual: self.perceptual - base.perceptual }
    }

    fn mean(items: &[RecMetrics]) -> RecMetrics {
        let n = items.len().max(1) as f64;
        let mut m = RecMetrics::default();
        for r in items {
            m.psnr += r.psnr;
            m.ssim += r.ssim;
            m.perceptual += r.perceptual;
        }
        RecMetrics { psnr: m.psnr / n, ssim: m.ssim / n, perceptual: m.perceptual / n }
    }

    fn measure(pred: &Frame, target: &Frame) -> Result<Self> {
        Ok(Self { psnr: psnr(pred, target)?, ssim: ssim(pred, target)?, perceptual: perceptual_distance(pred, target)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub multiple: usize,
    pub horizon: usize,
    pub unseen: bool,
    pub samples: usize,
    pub add: f64,
    pub rev: f64,
    pub direct: RecMetrics,
    pub cumulative: RecMetrics,
    /// Differences from the same regime at the smallest horizon.
    pub delta_direct: RecMetrics,
    pub delta_cumulative: RecMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub encoder_id: String,
    pub checkpoint: Option<String>,
    pub grid: HorizonGrid,
    pub norm: ErrorNorm,
    pub requested_anchors: usize,
    pub skipped_anchors: usize,
    pub perceptual_metric: String,
    pub rows: Vec<HorizonRow>,
}

impl ProbeReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.rows.iter().all(|r| r.samples == 0)
    }

    pub fn row(&self, multiple: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.multiple == multiple)
    }

    /// Checks the by-construction identities of a report.
    pub fn check_invariants(&self) -> Result<()> {
        let Some(first) = self.rows.first() else { return Ok(()) };
        if first.samples > 0 && first.add != 0.0 {
            return Err(AlamError::invalid(format!("Add at the smallest horizon is {}, not 0", first.add)));
        }
        if first.delta_direct != RecMetrics::default() || first.delta_cumulative != RecMetrics::default() {
            return Err(AlamError::invalid("delta at the smallest horizon is not 0"));
        }
        if self.rows.windows(2).any(|w| w[0].samples != w[1].samples) {
            return Err(AlamError::invalid("sample counts differ across horizons"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub episode: usize,
    pub view: View,
    pub start: usize,
}

/// Draws anchors from `episodes`; an anchor whose episode cannot hold the
/// longest horizon is counted as skipped.
pub fn sample_anchors(dataset: &Dataset, episodes: &[usize], grid: &HorizonGrid, n: usize, seed: u64) -> (Vec<Anchor>, usize) {
    let mut rng = rng_from(seed);
    let span = grid.max_span();
    let mut anchors = Vec::with_capacity(n);
    let mut skipped = 0;
    if episodes.is_empty() {
        return (anchors, n);
    }
    for _ in 0..n {
        let episode = episodes[rng.gen_range(0..episodes.len())];
        let view = View::ALL[rng.gen_range(0..2)];
        let len = dataset.episodes[episode].len();
        if len <= span {
            skipped += 1;
            continue;
        }
        let start = rng.gen_range(0..len - span);
        anchors.push(Anchor { episode, view, start });
    }
    (anchors, skipped)
}

/// Runs the full probe suite.
pub fn probe_report(
    encoder: &dyn TransitionEncoder,
    decoder: &dyn FrameDecoder,
    dataset: &Dataset,
    episodes: &[usize],
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let grid = &config.grid;
    grid.validate()?;
    let (anchors, skipped) = sample_anchors(dataset, episodes, grid, config.n_anchors, seed);
    let k = grid.stride;
    let t_max = *grid.multiples.last().expect("validated grid");

    // Every distinct ordered pair is encoded exactly once, so the chained sum
    // at t = 1 is bit-identical to the direct latent.
    let mut pair_ids: HashMap<(usize, View, usize, usize), usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut intern = |ep: usize, view: View, i: usize, j: usize| -> usize {
        *pair_ids.entry((ep, view, i, j)).or_insert_with(|| {
            pairs.push((ep, view, i, j));
            pairs.len() - 1
        })
    };
    struct AnchorPlan {
        short: Vec<usize>,
        long: Vec<usize>,
        back: Vec<usize>,
    }
    let plans: Vec<AnchorPlan> = anchors
        .iter()
        .map(|a| {
            let (e, v, s) = (a.episode, a.view, a.start);
            AnchorPlan {
                short: (0..t_max).map(|i| intern(e, v, s + i * k, s + (i + 1) * k)).collect(),
                long: grid.multiples.iter().map(|&t| intern(e, v, s, s + t * k)).collect(),
                back: grid.multiples.iter().map(|&t| intern(e, v, s + t * k, s)).collect(),
            }
        })
        .collect();
    let refs: Vec<(FrameRef, FrameRef)> = pairs
        .iter()
        .map(|&(e, v, i, j)| {
            let t = &dataset.episodes[e];
            (FrameRef::new(t, v, i), FrameRef::new(t, v, j))
        })
        .collect();
    let latents = if refs.is_empty() { Vec::new() } else { encoder.encode(&refs)? };

    let n_t = grid.multiples.len();
    let mut add = vec![Vec::new(); n_t];
    let mut rev = vec![Vec::new(); n_t];
    let mut decode_items: Vec<(FrameRef, Vec<f64>)> = Vec::new();
    let mut targets: Vec<&Frame> = Vec::new();
    for (a, plan) in anchors.iter().zip(&plans) {
        let traj = &dataset.episodes[a.episode];
        let src = FrameRef::new(traj, a.view, a.start);
        for (ti, &t) in grid.multiples.iter().enumerate() {
            let chain_parts: Vec<Vec<f64>> = plan.short[..t].iter().map(|&id| latents[id].clone()).collect();
            let chain = sum_latents(&chain_parts)?;
            let direct = &latents[plan.long[ti]];
            add[ti].push(additivity_error(direct, &chain, config.norm)?);
            rev[ti].push(reversibility_error(direct, &latents[plan.back[ti]], config.norm)?);
            let target = &traj.frames(a.view)[a.start + t * k];
            decode_items.push((src, direct.clone()));
            decode_items.push((src, chain));
            targets.push(target);
            targets.push(target);
        }
    }
    let items: Vec<(FrameRef, &[f64])> = decode_items.iter().map(|(s, z)| (*s, z.as_slice())).collect();
    let recon = if items.is_empty() { Vec::new() } else { decoder.decode(&items)? };

    let mut direct = vec![Vec::new(); n_t];
    let mut cumulative = vec![Vec::new(); n_t];
    for (idx, (pred, target)) in recon.iter().zip(&targets).enumerate() {
        let ti = (idx / 2) % n_t;
        let m = RecMetrics::measure(pred, target)?;
        if idx % 2 == 0 {
            direct[ti].push(m);
        } else {
            cumulative[ti].push(m);
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let direct_means: Vec<RecMetrics> = direct.iter().map(|d| RecMetrics::mean(d)).collect();
    let cumulative_means: Vec<RecMetrics> = cumulative.iter().map(|d| RecMetrics::mean(d)).collect();
    let rows = grid
        .multiples
        .iter()
        .enumerate()
        .map(|(ti, &t)| HorizonRow {
            multiple: t,
            horizon: t * k,
            unseen: !grid.supervised.contains(&t),
            samples: add[ti].len(),
            add: mean(&add[ti]),
            rev: mean(&rev[ti]),
            direct: direct_means[ti],
            cumulative: cumulative_means[ti],
            delta_direct: direct_means[ti].minus(direct_means[0]),
            delta_cumulative: cumulative_means[ti].minus(cumulative_means[0]),
        })
        .collect();
    let report = ProbeReport {
        encoder_id: encoder.id(),
        checkpoint: None,
        grid: grid.clone(),
        norm: config.norm,
        requested_anchors: config.n_anchors,
        skipped_anchors: skipped,
        perceptual_metric: PERCEPTUAL_LABEL.into(),
        rows,
    };
    report.check_invariants()?;
    Ok(report)
}

/// Panels `[o_a | D(o_a, z_ab) | D(o_a, z_ac) | D(o_a, z_ab + z_bc)]`.
pub struct CompositionGrid {
    pub panels: [Frame; 4],
    /// Mean squared difference between the composed and the direct panel.
    pub composed_vs_direct_mse: f64,
}

pub fn composition_grid(
    traj: &Trajectory,
    view: View,
    (a, b, c): (usize, usize, usize),
    encoder: &dyn TransitionEncoder,
    decoder: &dyn FrameDecoder,
) -> Result<CompositionGrid> {
    if !(a <= b && b <= c && c < traj.len()) {
        return Err(AlamError::invalid(format!("invalid composition indices ({a},{b},{c})")));
    }
    let fa = FrameRef::new(traj, view, a);
    let fb = FrameRef::new(traj, view, b);
    let fc = FrameRef::new(traj, view, c);
    let z = encoder.encode(&[(fa, fb), (fb, fc), (fa, fc)])?;
    let composed = sum_latents(&z[..2])?;
    let mut out = decoder.decode(&[(fa, &z[0]), (fa, &z[2]), (fa, &composed)])?.into_iter();
    let (p2, p3, p4) = (out.next().expect("3 frames"), out.next().expect("3 frames"), out.next().expect("3 frames"));
    let composed_vs_direct_mse = mse(&p4, &p3)?;
    Ok(CompositionGrid { panels: [fa.frame().clone(), p2, p3, p4], composed_vs_direct_mse })
}

impl CompositionGrid {
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let refs: Vec<&Frame> = self.panels.iter().collect();
        write_png_row(&refs, path)
    }
}

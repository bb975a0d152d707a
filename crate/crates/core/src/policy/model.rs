use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{LatentStats, PolicyBatch};
use super::flow::{euler, flow_sample_at, l1_per_modality, normal_tensor, sample_tau, weighted_total, InterventionKind};
use super::net::{NetConfig, SeqNet, BASE_CONTEXT, TOKEN_DIM};
use super::sequence::Modality;
use crate::error::{AlamError, Result};
use crate::nn::{from_f64, Linear, ParamBuilder, ParamStore, Precision, DEVICE};
use crate::optim::AdamWConfig;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArm {
    /// Latent and action tokens generated together under one flow.
    #[default]
    Joint,
    ActionOnly,
    /// A latent-only flow model followed by an action flow model that
    /// conditions on its samples.
    TwoStage,
    /// Same token layout with a noise-prediction diffusion objective.
    Diffusion,
}

impl PolicyArm {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| AlamError::invalid(format!("unknown policy arm `{s}`")))
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyArm::Joint => "joint",
            PolicyArm::ActionOnly => "action-only",
            PolicyArm::TwoStage => "two-stage",
            PolicyArm::Diffusion => "diffusion",
        }
    }

    pub fn uses_latents(self) -> bool {
        self != PolicyArm::ActionOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityWeights {
    pub th: f64,
    pub wr: f64,
    pub u: f64,
}

impl Default for ModalityWeights {
    fn default() -> Self {
        Self { th: 1.0, wr: 1.0, u: 1.0 }
    }
}

impl ModalityWeights {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Th => self.th,
            Modality::Wr => self.wr,
            Modality::U => self.u,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub arm: PolicyArm,
    pub net: NetConfig,
    pub horizon: usize,
    pub k_steps: usize,
    pub replan: usize,
    pub weights: ModalityWeights,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub demos: usize,
    pub eval_episodes: usize,
    /// Step budget of one closed-loop episode.
    pub max_episode_steps: usize,
    pub diffusion_steps: usize,
    pub latent_proj_bias: bool,
    pub precision: Precision,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            arm: PolicyArm::Joint,
            net: NetConfig::default(),
            horizon: 8,
            k_steps: 10,
            replan: 4,
            weights: ModalityWeights::default(),
            optimizer: AdamWConfig { lr: 5e-5, ..Default::default() },
            batch_size: 64,
            steps: 30_000,
            demos: 2_000,
            eval_episodes: 200,
            max_episode_steps: 64,
            diffusion_steps: 100,
            latent_proj_bias: false,
            precision: Precision::F32,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.k_steps == 0 || self.batch_size == 0 {
            return Err(AlamError::invalid("policy horizon, k_steps and batch_size must be positive"));
        }
        if self.replan == 0 || self.replan > self.horizon {
            return Err(AlamError::invalid("policy.replan must lie in 1..=horizon"));
        }
        if self.diffusion_steps < 2 {
            return Err(AlamError::invalid("policy.diffusion_steps must be at least 2"));
        }
        Ok(())
    }
}

/// Cosine noise schedule with `steps` discrete levels.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    /// `alpha_bar[s]` for `s = 0..=steps`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl CosineSchedule {
    pub fn new(steps: usize) -> Self {
        let f = |s: f64| (((s / steps as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = vec![1.0];
        for s in 1..=steps {
            let beta = (1.0 - f(s as f64) / f(s as f64 - 1.0)).min(0.999);
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - beta));
        }
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }
}

/// Noise used by one loss evaluation: flow times (or diffusion levels) per
/// row and one noise tensor per modality.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub time: Vec<f64>,
    pub levels: Vec<usize>,
    pub eps: Vec<Tensor>,
}

pub struct PolicyLoss {
    pub total: Tensor,
    /// Per-modality loss values in `[th, wr, u]` order (0 where absent).
    pub parts: [f64; 3],
}

/// Generated chunk: actions plus the projected latent streams, if any.
pub struct Generated {
    pub actions: Tensor,
    pub latents: Option<[Tensor; 2]>,
}

const SAMPLE_CLIP: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub latent_dim: usize,
    pub params: ParamStore,
    pub latent_stats: Option<LatentStats>,
    proj: Option<[Linear; 2]>,
    net: SeqNet,
    stage1: Option<SeqNet>,
    schedule: CosineSchedule,
}

impl PolicyModel {
    pub fn new(config: &PolicyConfig, latent_dim: usize, latent_stats: Option<LatentStats>, seed: u64) -> Result<Self> {
        config.validate()?;
        let arm = config.arm;
        if arm.uses_latents() && (latent_dim == 0 || latent_stats.is_none()) {
            return Err(AlamError::invalid(format!("arm {} needs latent streams", arm.name())));
        }
        let mut pb = ParamBuilder::new(config.precision.dtype(), seed);
        let h = config.horizon;
        let proj = if arm.uses_latents() {
            let mk = |pb: &mut ParamBuilder, n: &str| {
                Linear::with_std(pb, n, latent_dim, TOKEN_DIM, config.latent_proj_bias, 1.0 / (latent_dim as f64).sqrt())
            };
            Some([mk(&mut pb, "policy.proj_th")?, mk(&mut pb, "policy.proj_wr")?])
        } else {
            None
        };
        let (net, stage1) = match arm {
            PolicyArm::Joint | PolicyArm::Diffusion => {
                (SeqNet::new(&mut pb, "policy.net", &config.net, &Modality::ALL, h, 0)?, None)
            }
            PolicyArm::ActionOnly => (SeqNet::new(&mut pb, "policy.net", &config.net, &[Modality::U], h, 0)?, None),
            PolicyArm::TwoStage => {
                let s1 = SeqNet::new(&mut pb, "policy.stage1", &config.net, &[Modality::Th, Modality::Wr], h, 0)?;
                let s2 = SeqNet::new(&mut pb, "policy.net", &config.net, &[Modality::U], h, 2 * h)?;
                (s2, Some(s1))
            }
        };
        Ok(Self {
            config: config.clone(),
            latent_dim: if arm.uses_latents() { latent_dim } else { 0 },
            params: pb.finish(),
            latent_stats,
            proj,
            net,
            stage1,
            schedule: CosineSchedule::new(config.diffusion_steps),
        })
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn arm(&self) -> PolicyArm {
        self.config.arm
    }

    /// Linear map of standardised latents `(B, H, D_z)` to token width.
    pub fn project_latent(&self, z: &Tensor, modality: Modality) -> Result<Tensor> {
        let proj = self.proj.as_ref().ok_or_else(|| AlamError::invalid("this arm has no latent projection"))?;
        match modality {
            Modality::Th => proj[0].forward(z),
            Modality::Wr => proj[1].forward(z),
            Modality::U => Err(AlamError::invalid("actions are not projected")),
        }
    }

    /// Clean token values `[th, wr, u]` (or `[u]`) for a batch.
    pub fn targets(&self, batch: &PolicyBatch) -> Result<Vec<Tensor>> {
        if !self.arm().uses_latents() {
            return Ok(vec![batch.actions.clone()]);
        }
        let z = batch.latents.as_ref().ok_or_else(|| AlamError::invalid("batch carries no latent streams"))?;
        Ok(vec![self.project_latent(&z[0], Modality::Th)?, self.project_latent(&z[1], Modality::Wr)?, batch.actions.clone()])
    }

    fn modalities(&self) -> Vec<Modality> {
        if self.arm().uses_latents() {
            Modality::ALL.to_vec()
        } else {
            vec![Modality::U]
        }
    }

    /// Draws flow times or diffusion levels and per-modality noise.
    pub fn draw_noise(&self, batch: usize, rng: &mut Rng) -> Result<NoiseDraw> {
        let h = self.config.horizon;
        let (time, levels) = if self.arm() == PolicyArm::Diffusion {
            use rand::Rng as _;
            let t = self.schedule.steps();
            let levels: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=t)).collect();
            (levels.iter().map(|&s| s as f64 / t as f64).collect(), levels)
        } else {
            ((0..batch).map(|_| sample_tau(rng)).collect(), Vec::new())
        };
        let eps = self
            .modalities()
            .iter()
            .map(|_| normal_tensor(&[batch, h, TOKEN_DIM], rng, self.dtype()))
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseDraw { time, levels, eps })
    }

    pub fn loss(&self, batch: &PolicyBatch, rng: &mut Rng) -> Result<PolicyLoss> {
        let ys = self.targets(batch)?;
        let draw = self.draw_noise(batch.ctx.dim(0)?, rng)?;
        self.loss_with(&batch.ctx, &ys, &ys, &draw)
    }

    /// Loss for explicit noise. `ys_in` enter the noisy inputs; `ys_target`
    /// define the regression targets and are treated as constants.
    pub fn loss_with(&self, ctx: &Tensor, ys_in: &[Tensor], ys_target: &[Tensor], draw: &NoiseDraw) -> Result<PolicyLoss> {
        let mods = self.modalities();
        if ys_in.len() != mods.len() || ys_target.len() != mods.len() || draw.eps.len() != mods.len() {
            return Err(AlamError::invalid("modality count mismatch in policy loss"));
        }
        let b = ctx.dim(0)?;
        let time = from_f64(&draw.time, &[b], self.dtype())?;
        let weights: Vec<f64> = mods.iter().map(|&m| self.config.weights.get(m)).collect();
        let losses: Vec<Tensor> = match self.arm() {
            PolicyArm::Diffusion => {
                let ab: Vec<f64> = draw.levels.iter().map(|&s| self.schedule.alpha_bar[s]).collect();
                let sa = from_f64(&ab.iter().map(|a| a.sqrt()).collect::<Vec<_>>(), &[b, 1, 1], self.dtype())?;
                let sn = from_f64(&ab.iter().map(|a| (1.0 - a).sqrt()).collect::<Vec<_>>(), &[b, 1, 1], self.dtype())?;
                let x: Vec<Tensor> = ys_in
                    .iter()
                    .zip(&draw.eps)
                    .map(|(y, e)| Ok((y.broadcast_mul(&sa)? + e.broadcast_mul(&sn)?)?))
                    .collect::<Result<_>>()?;
                let pred = self.net.forward(ctx, None, &x, &time, &self.net.attention_bias(false)?)?;
                pred.iter().zip(&draw.eps).map(|(p, e)| Ok((p - e)?.sqr()?.mean_all()?)).collect::<Result<_>>()?
            }
            PolicyArm::Joint | PolicyArm::ActionOnly => {
                let s = flow_sample_at(ys_in, &draw.time, draw.eps.clone())?;
                let v: Vec<Tensor> =
                    draw.eps.iter().zip(ys_target).map(|(e, y)| Ok((e - y.detach())?)).collect::<Result<_>>()?;
                let pred = self.net.forward(ctx, None, &s.x, &time, &self.net.attention_bias(false)?)?;
                l1_per_modality(&pred, &v)?
            }
            PolicyArm::TwoStage => {
                let stage1 = self.stage1.as_ref().expect("two-stage model has a latent stage");
                let s = flow_sample_at(ys_in, &draw.time, draw.eps.clone())?;
                let v: Vec<Tensor> =
                    draw.eps.iter().zip(ys_target).map(|(e, y)| Ok((e - y.detach())?)).collect::<Result<_>>()?;
                let lat = stage1.forward(ctx, None, &s.x[..2], &time, &stage1.attention_bias(false)?)?;
                let extra = interleave_latents(&ys_in[0], &ys_in[1])?;
                let act = self.net.forward(ctx, Some(&extra), &s.x[2..], &time, &self.net.attention_bias(false)?)?;
                let mut pred = lat;
                pred.extend(act);
                l1_per_modality(&pred, &v)?
            }
        };
        let (total, values) = weighted_total(&losses, &weights)?;
        let mut parts = [0.0; 3];
        for (m, v) in mods.iter().zip(values) {
            parts[m.index()] = v;
        }
        Ok(PolicyLoss { total, parts })
    }

    /// Generates action chunks for a batch of contexts.
    ///
    /// `noise` holds the initial Gaussian draw per modality in `[th, wr, u]`
    /// order, each `(B, H, TOKEN_DIM)`; arms without latents use only the
    /// last entry. `perm` is the temporal permutation used by the shuffle
    /// intervention.
    pub fn generate(&self, ctx: &Tensor, noise: &[Tensor; 3], intervention: InterventionKind, perm: &[usize]) -> Result<Generated> {
        let h = self.config.horizon;
        if perm.len() != h {
            return Err(AlamError::invalid("shuffle permutation must cover the horizon"));
        }
        let k = self.config.k_steps;
        let b = ctx.dim(0)?;
        let bias = self.net.attention_bias(false)?;
        let blocked = self.net.attention_bias(intervention == InterventionKind::Block)?;
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), h, &DEVICE)?;
        let permute = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&idx, 1)?) };
        match self.arm() {
            PolicyArm::ActionOnly => {
                let out = euler(vec![noise[2].clone()], k, |x, tau| {
                    let time = self.net.time_column(b, tau)?;
                    self.net.forward(ctx, None, x, &time, &bias)
                })?;
                Ok(Generated { actions: out[0].clone(), latents: None })
            }
            PolicyArm::Joint => {
                let out = euler(noise.to_vec(), k, |x, tau| {
                    let time = self.net.time_column(b, tau)?;
                    let mut v = self.net.forward(ctx, None, x, &time, &blocked)?;
                    match intervention {
                        InterventionKind::Freeze => {
                            v[0] = v[0].zeros_like()?;
                            v[1] = v[1].zeros_like()?;
                        }
                        InterventionKind::Shuffle => {
                            let xs = [permute(&x[0])?, permute(&x[1])?, x[2].clone()];
                            v[2] = self.net.forward(ctx, None, &xs, &time, &bias)?.remove(2);
                        }
                        InterventionKind::None | InterventionKind::Block => {}
                    }
                    Ok(v)
                })?;
                Ok(Generated { actions: out[2].clone(), latents: Some([out[0].clone(), out[1].clone()]) })
            }
            PolicyArm::TwoStage => {
                let stage1 = self.stage1.as_ref().expect("two-stage model has a latent stage");
                let s1_bias = stage1.attention_bias(false)?;
                let lat = if intervention == InterventionKind::Freeze {
                    vec![noise[0].clone(), noise[1].clone()]
                } else {
                    euler(noise[..2].to_vec(), k, |x, tau| {
                        let time = stage1.time_column(b, tau)?;
                        stage1.forward(ctx, None, x, &time, &s1_bias)
                    })?
                };
                let shown = if intervention == InterventionKind::Shuffle {
                    [permute(&lat[0])?, permute(&lat[1])?]
                } else {
                    [lat[0].clone(), lat[1].clone()]
                };
                let extra = interleave_latents(&shown[0], &shown[1])?;
                let s2_bias = if intervention == InterventionKind::Block {
                    self.stage2_blocked_bias()?
                } else {
                    bias.clone()
                };
                let out = euler(vec![noise[2].clone()], k, |x, tau| {
                    let time = self.net.time_column(b, tau)?;
                    self.net.forward(ctx, Some(&extra), x, &time, &s2_bias)
                })?;
                Ok(Generated { actions: out[0].clone(), latents: Some([lat[0].clone(), lat[1].clone()]) })
            }
            PolicyArm::Diffusion => self.ddim(ctx, noise, intervention, &bias, &blocked, &permute),
        }
    }

    /// Stage-two bias with the generated-latent context columns hidden.
    fn stage2_blocked_bias(&self) -> Result<Tensor> {
        let n_ctx = self.net.n_context();
        let h = self.config.horizon;
        let n = n_ctx + h;
        let mut vis = super::sequence::mask_for(&super::sequence::layout(h, &[Modality::U]), n_ctx, false);
        for row in vis.iter_mut().take(n).skip(n_ctx) {
            for v in row.iter_mut().take(n_ctx).skip(BASE_CONTEXT) {
                *v = false;
            }
        }
        Ok(crate::nn::visibility_bias(&vis, self.dtype())?.unsqueeze(0)?.unsqueeze(0)?)
    }

    fn ddim(
        &self,
        ctx: &Tensor,
        noise: &[Tensor; 3],
        intervention: InterventionKind,
        bias: &Tensor,
        blocked: &Tensor,
        permute: &dyn Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<Generated> {
        let b = ctx.dim(0)?;
        let t = self.schedule.steps();
        let k = self.config.k_steps.min(t);
        let levels: Vec<usize> = (0..=k).map(|i| (i * t + k / 2) / k).collect();
        let mut x = noise.to_vec();
        for i in (1..=k).rev() {
            let (s, prev) = (levels[i], levels[i - 1]);
            let (ab, ab_prev) = (self.schedule.alpha_bar[s], self.schedule.alpha_bar[prev]);
            let time = self.net.time_column(b, s as f64 / t as f64)?;
            let mut eps = self.net.forward(ctx, None, &x, &time, blocked)?;
            if intervention == InterventionKind::Shuffle {
                let xs = [permute(&x[0])?, permute(&x[1])?, x[2].clone()];
                eps[2] = self.net.forward(ctx, None, &xs, &time, bias)?.remove(2);
            }
            let mut next = Vec::with_capacity(3);
            for (m, (xm, em)) in x.iter().zip(&eps).enumerate() {
                if m < 2 && intervention == InterventionKind::Freeze {
                    next.push(xm.clone());
                    continue;
                }
                let y0 = ((xm - (em * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-SAMPLE_CLIP, SAMPLE_CLIP)?;
                next.push(((y0 * ab_prev.sqrt())? + (em * (1.0 - ab_prev).sqrt())?)?);
            }
            x = next;
        }
        Ok(Generated { actions: x[2].clone(), latents: Some([x[0].clone(), x[1].clone()]) })
    }

    /// Random temporal permutation for the shuffle intervention.
    pub fn shuffle_permutation(horizon: usize, rng: &mut Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..horizon).collect();
        p.shuffle(rng);
        p
    }
}

/// `[th_1, wr_1, th_2, wr_2, ...]` along the token axis.
fn interleave_latents(th: &Tensor, wr: &Tensor) -> Result<Tensor> {
    let (b, h, d) = th.dims3()?;
    Ok(Tensor::stack(&[th, wr], 2)?.reshape((b, 2 * h, d))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::policy::data::DemoSet;
    use crate::probes::OracleEncoder;
    use crate::rng::rng_from;
    use crate::synthworld::WorldConfig;

    fn setup(arm: PolicyArm, horizon: usize) -> (PolicyModel, PolicyBatch) {
        let wc = WorldConfig { resolution: 16, ..Default::default() };
        let set = DemoSet::generate(&wc, 3, horizon, 2, Some(&OracleEncoder)).unwrap();
        let cfg = PolicyConfig {
            arm,
            horizon,
            replan: 1,
            net: NetConfig { hidden: 16, layers: 1, heads: 2, mlp_ratio: 2, pool: 4 },
            diffusion_steps: 20,
            precision: Precision::F64,
            ..Default::default()
        };
        let model = PolicyModel::new(&cfg, 2, set.latent_stats.clone(), 11).unwrap();
        let batch = set.sample_batch(4, 4, &mut rng_from(1), DType::F64).unwrap();
        (model, batch)
    }

    fn noise(b: usize, h: usize, seed: u64) -> [Tensor; 3] {
        let mut rng = rng_from(seed);
        [0, 1, 2].map(|_| normal_tensor(&[b, h, 2], &mut rng, DType::F64).unwrap())
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let (m, _) = setup(PolicyArm::Joint, 2);
        let z = from_f64(&[0.0; 4], &[1, 2, 2], DType::F64).unwrap();
        assert!(to_f64_vec(&m.project_latent(&z, Modality::Th).unwrap()).unwrap().iter().all(|v| *v == 0.0));
        let z = from_f64(&[0.5, -1.0, 2.0, 0.25], &[1, 2, 2], DType::F64).unwrap();
        let a = to_f64_vec(&m.project_latent(&(&z * 3.0).unwrap(), Modality::Wr).unwrap()).unwrap();
        let b = to_f64_vec(&m.project_latent(&z, Modality::Wr).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - 3.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn every_arm_produces_finite_losses_and_chunks() {
        for arm in [PolicyArm::Joint, PolicyArm::ActionOnly, PolicyArm::TwoStage, PolicyArm::Diffusion] {
            let (m, batch) = setup(arm, 3);
            let loss = m.loss(&batch, &mut rng_from(0)).unwrap();
            assert!(loss.parts.iter().all(|v| v.is_finite()));
            if arm == PolicyArm::ActionOnly {
                assert_eq!(&loss.parts[..2], &[0.0, 0.0]);
            }
            for kind in InterventionKind::ALL {
                let g = m.generate(&batch.ctx, &noise(4, 3, 5), kind, &[2, 0, 1]).unwrap();
                assert_eq!(g.actions.dims(), &[4, 3, 2]);
                assert!(to_f64_vec(&g.actions).unwrap().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn shuffle_with_single_step_is_identity() {
        for arm in [PolicyArm::Joint, PolicyArm::TwoStage, PolicyArm::Diffusion] {
            let (m, batch) = setup(arm, 1);
            let n = noise(4, 1, 9);
            let a = m.generate(&batch.ctx, &n, InterventionKind::None, &[0]).unwrap();
            let b = m.generate(&batch.ctx, &n, InterventionKind::Shuffle, &[0]).unwrap();
            assert_eq!(to_f64_vec(&a.actions).unwrap(), to_f64_vec(&b.actions).unwrap());
        }
    }

    #[test]
    fn freeze_keeps_latents_at_noise() {
        let (m, batch) = setup(PolicyArm::Joint, 3);
        let n = noise(4, 3, 4);
        let g = m.generate(&batch.ctx, &n, InterventionKind::Freeze, &[0, 1, 2]).unwrap();
        let lat = g.latents.unwrap();
        assert_eq!(to_f64_vec(&lat[0]).unwrap(), to_f64_vec(&n[0]).unwrap());
        assert_eq!(to_f64_vec(&lat[1]).unwrap(), to_f64_vec(&n[1]).unwrap());
    }

    #[test]
    fn interventions_leave_parameters_untouched() {
        let (m, batch) = setup(PolicyArm::Joint, 3);
        let before = m.params.export().unwrap();
        for kind in InterventionKind::ALL {
            m.generate(&batch.ctx, &noise(4, 3, 1), kind, &[1, 2, 0]).unwrap();
        }
        assert_eq!(before, m.params.export().unwrap());
    }

    #[test]
    fn cosine_schedule_is_monotone() {
        let s = CosineSchedule::new(100);
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[100] < 1e-3 && s.alpha_bar[100] > 0.0);
    }
}

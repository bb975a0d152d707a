//! Expert demonstrations with frozen-encoder latent streams.

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::net::context_from_state;
use crate::error::{AlamError, Result};
use crate::nn::{from_f32, from_f64};
use crate::probes::{FrameRef, TransitionEncoder};
use crate::rng::{derive_indexed, Rng};
use crate::synthworld::{expert_action, generate_expert_episode, step_dynamics, Trajectory, View, WorldConfig, WorldState};

/// Per-view, per-dimension standardisation of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: [Vec<f64>; 2],
    pub std: [Vec<f64>; 2],
}

impl LatentStats {
    pub fn normalize(&self, view: View, z: &[f64]) -> Vec<f64> {
        let v = view.index();
        z.iter().zip(&self.mean[v]).zip(&self.std[v]).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    /// States including `horizon` padding steps after the expert stops.
    pub states: Vec<WorldState>,
    pub actions: Vec<[f64; 2]>,
    /// Number of actions the expert took before reaching the goal.
    pub expert_len: usize,
    /// `latents[view][t] = E(I_t, I_{t+1})`, when extracted.
    pub latents: Option<[Vec<Vec<f64>>; 2]>,
}

#[derive(Clone, Debug)]
pub struct DemoSet {
    pub world: WorldConfig,
    pub horizon: usize,
    pub demos: Vec<Demo>,
    pub latent_stats: Option<LatentStats>,
}

/// Extends an expert episode by `extra` further expert steps so every
/// start inside the episode has a full action window.
fn pad_with_expert(traj: &Trajectory, extra: usize, world: &WorldConfig) -> Result<(Vec<WorldState>, Vec<[f64; 2]>)> {
    let mut states = traj.states.clone();
    let mut actions: Vec<[f64; 2]> = traj.actions.iter().map(|a| a.u).collect();
    for _ in 0..extra {
        let s = states.last().expect("non-empty");
        let a = expert_action(s, world.max_step);
        states.push(step_dynamics(s, &a)?);
        actions.push(a.u);
    }
    Ok((states, actions))
}

/// Runs `encoder` on every adjacent frame pair of both views.
pub fn extract_latent_stream(traj: &Trajectory, encoder: &dyn TransitionEncoder) -> Result<[Vec<Vec<f64>>; 2]> {
    if traj.len() < 2 {
        return Err(AlamError::invalid("latent extraction needs at least two frames"));
    }
    let mut out: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for view in View::ALL {
        let pairs: Vec<_> =
            (0..traj.len() - 1).map(|t| (FrameRef::new(traj, view, t), FrameRef::new(traj, view, t + 1))).collect();
        out[view.index()] = encoder.encode(&pairs)?;
    }
    Ok(out)
}

impl DemoSet {
    /// Generates `count` expert demonstrations. Latent streams are extracted
    /// only when an encoder is supplied.
    pub fn generate(
        world: &WorldConfig,
        count: usize,
        horizon: usize,
        seed: u64,
        encoder: Option<&dyn TransitionEncoder>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(AlamError::invalid("policy horizon must be positive"));
        }
        let mut demos = Vec::with_capacity(count);
        for i in 0..count {
            let (traj, _) = generate_expert_episode(derive_indexed(seed, "demo", i as u64), world)?;
            let expert_len = traj.actions.len().max(1);
            let (states, actions) = pad_with_expert(&traj, horizon, world)?;
            let latents = match encoder {
                Some(enc) => {
                    let full = Trajectory::from_states(
                        states.clone(),
                        actions.iter().map(|&u| crate::synthworld::ActionCmd { u }).collect(),
                        world,
                    );
                    Some(extract_latent_stream(&full, enc)?)
                }
                None => None,
            };
            demos.push(Demo { states, actions, expert_len, latents });
        }
        let latent_stats = if encoder.is_some() { Some(compute_stats(&demos)?) } else { None };
        Ok(Self { world: world.clone(), horizon, demos, latent_stats })
    }

    pub fn has_latents(&self) -> bool {
        self.latent_stats.is_some()
    }

    /// Samples a training batch of windows.
    pub fn sample_batch(&self, batch: usize, pool: usize, rng: &mut Rng, dtype: DType) -> Result<PolicyBatch> {
        if self.demos.is_empty() {
            return Err(AlamError::invalid("empty demonstration set"));
        }
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let d = rng.gen_range(0..self.demos.len());
                let t0 = rng.gen_range(0..self.demos[d].expert_len);
                (d, t0)
            })
            .collect();
        self.batch_from(&picks, pool, dtype)
    }

    /// Builds the batch for explicit `(demo, start)` windows.
    pub fn batch_from(&self, picks: &[(usize, usize)], pool: usize, dtype: DType) -> Result<PolicyBatch> {
        let h = self.horizon;
        let b = picks.len();
        let max_step = self.world.max_step;
        let mut ctx = Vec::new();
        let mut u = Vec::with_capacity(b * h * 2);
        let dz = self.latent_dim();
        let mut z: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for &(d, t0) in picks {
            let demo = &self.demos[d];
            if t0 + h > demo.actions.len() {
                return Err(AlamError::invalid("window runs past the padded demonstration"));
            }
            ctx.extend(context_from_state(&demo.states[t0], &self.world, pool));
            for a in &demo.actions[t0..t0 + h] {
                u.extend(a.iter().map(|v| v / max_step));
            }
            if let (Some(lat), Some(stats)) = (&demo.latents, &self.latent_stats) {
                for view in View::ALL {
                    for zt in &lat[view.index()][t0..t0 + h] {
                        z[view.index()].extend(stats.normalize(view, zt));
                    }
                }
            }
        }
        let width = ctx.len() / b.max(1);
        let latents = if self.has_latents() {
            Some([from_f64(&z[0], &[b, h, dz], dtype)?, from_f64(&z[1], &[b, h, dz], dtype)?])
        } else {
            None
        };
        Ok(PolicyBatch {
            ctx: from_f32(&ctx, &[b, width], dtype)?,
            latents,
            actions: from_f64(&u, &[b, h, 2], dtype)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_stats.as_ref().map_or(0, |s| s.mean[0].len())
    }
}

fn compute_stats(demos: &[Demo]) -> Result<LatentStats> {
    let mut mean: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut std: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for v in 0..2 {
        let rows: Vec<&Vec<f64>> =
            demos.iter().filter_map(|d| d.latents.as_ref()).flat_map(|l| l[v].iter()).collect();
        let first = rows.first().ok_or_else(|| AlamError::invalid("no latents to standardise"))?;
        let dz = first.len();
        let n = rows.len() as f64;
        let m: Vec<f64> = (0..dz).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let s: Vec<f64> = (0..dz)
            .map(|k| (rows.iter().map(|r| (r[k] - m[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-6))
            .collect();
        mean[v] = m;
        std[v] = s;
    }
    Ok(LatentStats { mean, std })
}

/// Tensors for one policy optimisation step.
pub struct PolicyBatch {
    /// `(B, F)` context features.
    pub ctx: Tensor,
    /// Standardised latents `(B, H, D_z)` per view.
    pub latents: Option<[Tensor; 2]>,
    /// Actions divided by the per-step bound, `(B, H, 2)`.
    pub actions: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::OracleEncoder;
    use crate::rng::rng_from;
    use std::cell::Cell;

    struct Counting<'a> {
        inner: &'a dyn TransitionEncoder,
        calls: Cell<usize>,
    }

    impl TransitionEncoder for Counting<'_> {
        fn latent_dim(&self) -> usize {
            self.inner.latent_dim()
        }
        fn id(&self) -> String {
            self.inner.id()
        }
        fn encode(&self, pairs: &[(FrameRef<'_>, FrameRef<'_>)]) -> Result<Vec<Vec<f64>>> {
            self.calls.set(self.calls.get() + 1);
            self.inner.encode(pairs)
        }
    }

    fn world() -> WorldConfig {
        WorldConfig { resolution: 16, ..Default::default() }
    }

    #[test]
    fn latent_stream_has_one_latent_per_action() {
        let wc = world();
        let (traj, _) = generate_expert_episode(3, &wc).unwrap();
        let traj = Trajectory::from_states(traj.states[..9].to_vec(), traj.actions[..8].to_vec(), &wc);
        let z = extract_latent_stream(&traj, &OracleEncoder).unwrap();
        assert_eq!((z[0].len(), z[1].len()), (8, 8));
    }

    #[test]
    fn windows_are_padded_and_normalised() {
        let wc = world();
        let set = DemoSet::generate(&wc, 3, 4, 1, Some(&OracleEncoder)).unwrap();
        for d in &set.demos {
            assert_eq!(d.actions.len(), d.expert_len + 4);
            assert_eq!(d.latents.as_ref().unwrap()[0].len(), d.actions.len());
        }
        let b = set.sample_batch(5, 4, &mut rng_from(0), DType::F64).unwrap();
        assert_eq!(b.actions.dims(), &[5, 4, 2]);
        assert_eq!(b.latents.as_ref().unwrap()[1].dims(), &[5, 4, 2]);
        let a = crate::nn::to_f64_vec(&b.actions).unwrap();
        assert!(a.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn action_only_sets_never_call_the_encoder() {
        let wc = world();
        let counting = Counting { inner: &OracleEncoder, calls: Cell::new(0) };
        let set = DemoSet::generate(&wc, 2, 4, 1, None).unwrap();
        assert!(set.demos.iter().all(|d| d.latents.is_none()));
        assert_eq!(counting.calls.get(), 0);
        DemoSet::generate(&wc, 2, 4, 1, Some(&counting)).unwrap();
        assert_eq!(counting.calls.get(), 4);
    }
}

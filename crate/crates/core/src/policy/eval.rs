//! Closed-loop evaluation on the reaching task.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::flow::{normal_tensor, InterventionKind};
use super::model::PolicyModel;
use super::net::{context_from_state, TOKEN_DIM};
use crate::error::{AlamError, Result};
use crate::nn::{from_f32, to_f64_vec};
use crate::rng::{derive_indexed, rng_from};
use crate::synthworld::{expert_action, goal_reached, sample_reaching_start, step_dynamics, ActionCmd, WorldConfig, WorldState};

/// Anything that proposes action chunks for a batch of states.
pub trait ChunkSource {
    fn horizon(&self) -> usize;
    /// One chunk of `horizon()` actions per state. `noise_seeds[i]` seeds all
    /// randomness used for row `i`.
    fn chunks(&self, states: &[WorldState], noise_seeds: &[u64]) -> Result<Vec<Vec<[f64; 2]>>>;
}

/// Rolls the scripted expert forward; a harness sanity check.
pub struct ExpertChunks {
    pub world: WorldConfig,
    pub horizon: usize,
}

impl ChunkSource for ExpertChunks {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn chunks(&self, states: &[WorldState], _: &[u64]) -> Result<Vec<Vec<[f64; 2]>>> {
        states
            .iter()
            .map(|s| {
                let mut cur = s.clone();
                let mut out = Vec::with_capacity(self.horizon);
                for _ in 0..self.horizon {
                    let a = expert_action(&cur, self.world.max_step);
                    cur = step_dynamics(&cur, &a)?;
                    out.push(a.u);
                }
                Ok(out)
            })
            .collect()
    }
}

pub struct PolicyRunner<'a> {
    pub model: &'a PolicyModel,
    pub world: WorldConfig,
    pub intervention: InterventionKind,
}

impl ChunkSource for PolicyRunner<'_> {
    fn horizon(&self) -> usize {
        self.model.config.horizon
    }

    fn chunks(&self, states: &[WorldState], noise_seeds: &[u64]) -> Result<Vec<Vec<[f64; 2]>>> {
        let b = states.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let h = self.horizon();
        let pool = self.model.config.net.pool;
        let dtype = self.model.dtype();
        let mut ctx = Vec::new();
        for s in states {
            ctx.extend(context_from_state(s, &self.world, pool));
        }
        let ctx = from_f32(&ctx, &[b, ctx.len() / b], dtype)?;
        let mut rows: [Vec<Tensor>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        // Permutation is drawn after the noise from the first row's stream;
        // rows of one call share it.
        let mut perm = None;
        for &seed in noise_seeds {
            let mut rng = rng_from(seed);
            for r in rows.iter_mut() {
                r.push(normal_tensor(&[1, h, TOKEN_DIM], &mut rng, dtype)?);
            }
            let p = PolicyModel::shuffle_permutation(h, &mut rng);
            perm.get_or_insert(p);
        }
        if noise_seeds.len() != b {
            return Err(AlamError::invalid("one noise seed per state is required"));
        }
        let noise = [Tensor::cat(&rows[0], 0)?, Tensor::cat(&rows[1], 0)?, Tensor::cat(&rows[2], 0)?];
        let g = self.model.generate(&ctx, &noise, self.intervention, &perm.expect("non-empty batch"))?;
        let vals = to_f64_vec(&g.actions)?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(AlamError::non_finite("generated actions"));
        }
        let m = self.world.max_step;
        Ok(vals
            .chunks(h * TOKEN_DIM)
            .map(|row| row.chunks(TOKEN_DIM).map(|a| [(a[0] * m).clamp(-m, m), (a[1] * m).clamp(-m, m)]).collect())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub replan: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 200, max_steps: 64, replan: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    pub final_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub intervention: InterventionKind,
    pub episodes: usize,
    pub successes: usize,
    /// `None` when no episode was run.
    pub success_rate: Option<f64>,
    pub interval: Option<(f64, f64)>,
    pub log: Vec<EpisodeLog>,
}

const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval at 95%; `None` for zero trials.
pub fn wilson_interval(successes: usize, n: usize) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Some(((centre - half).max(0.0), (centre + half).min(1.0)))
}

pub fn episode_start(seed: u64, episode: usize, world: &WorldConfig) -> WorldState {
    sample_reaching_start(derive_indexed(seed, "eval.start", episode as u64), world)
}

/// Seed for the noise of replan `r` in `episode`; independent of the arm.
pub fn replan_seed(seed: u64, episode: usize, r: usize) -> u64 {
    derive_indexed(derive_indexed(seed, "eval.noise", episode as u64), "replan", r as u64)
}

/// Runs all episodes in lock-step, querying `source` at every replan point.
pub fn evaluate(
    source: &dyn ChunkSource,
    world: &WorldConfig,
    cfg: &EvalConfig,
    label: &str,
    intervention: InterventionKind,
) -> Result<EvalReport> {
    if cfg.replan == 0 || cfg.replan > source.horizon() {
        return Err(AlamError::invalid("replan interval must lie in 1..=horizon"));
    }
    let n = cfg.episodes;
    let mut states: Vec<WorldState> = (0..n).map(|e| episode_start(cfg.seed, e, world)).collect();
    let mut done: Vec<Option<usize>> = (0..n).map(|e| goal_reached(&states[e], world.goal_eps).then_some(0)).collect();
    let mut steps = 0;
    let mut r = 0;
    while steps < cfg.max_steps {
        let active: Vec<usize> = (0..n).filter(|&e| done[e].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let batch: Vec<WorldState> = active.iter().map(|&e| states[e].clone()).collect();
        let seeds: Vec<u64> = active.iter().map(|&e| replan_seed(cfg.seed, e, r)).collect();
        let chunks = source.chunks(&batch, &seeds)?;
        let take = cfg.replan.min(cfg.max_steps - steps);
        for (&e, chunk) in active.iter().zip(&chunks) {
            for (i, u) in chunk.iter().take(take).enumerate() {
                states[e] = step_dynamics(&states[e], &ActionCmd { u: *u })?;
                if goal_reached(&states[e], world.goal_eps) {
                    done[e] = Some(steps + i + 1);
                    break;
                }
            }
        }
        steps += take;
        r += 1;
    }
    let log: Vec<EpisodeLog> = (0..n)
        .map(|e| {
            let s = &states[e];
            let d = (s.goal_pos[0] - s.agent_pos[0]).abs().max((s.goal_pos[1] - s.agent_pos[1]).abs());
            EpisodeLog { episode: e, success: done[e].is_some(), steps: done[e].unwrap_or(steps), final_distance: d }
        })
        .collect();
    let successes = log.iter().filter(|l| l.success).count();
    Ok(EvalReport {
        label: label.to_string(),
        intervention,
        episodes: n,
        successes,
        success_rate: (n > 0).then(|| successes as f64 / n as f64),
        interval: wilson_interval(successes, n),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_in_the_loop_always_succeeds() {
        let world = WorldConfig { resolution: 16, ..Default::default() };
        let src = ExpertChunks { world: world.clone(), horizon: 8 };
        let cfg = EvalConfig { episodes: 40, max_steps: 64, replan: 4, seed: 1 };
        let rep = evaluate(&src, &world, &cfg, "expert", InterventionKind::None).unwrap();
        assert_eq!(rep.success_rate, Some(1.0));
    }

    #[test]
    fn zero_episodes_give_an_empty_report() {
        let world = WorldConfig { resolution: 16, ..Default::default() };
        let src = ExpertChunks { world: world.clone(), horizon: 4 };
        let cfg = EvalConfig { episodes: 0, ..Default::default() };
        let rep = evaluate(&src, &world, &cfg, "expert", InterventionKind::None).unwrap();
        assert_eq!((rep.episodes, rep.successes, rep.success_rate, rep.interval), (0, 0, None, None));
        assert!(rep.log.is_empty());
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(5, 10).unwrap();
        assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5);
        let (lo, hi) = wilson_interval(10, 10).unwrap();
        assert!((hi - 1.0).abs() < 1e-12 && (lo - 0.722_467).abs() < 1e-5);
        assert_eq!(wilson_interval(0, 0), None);
    }
}

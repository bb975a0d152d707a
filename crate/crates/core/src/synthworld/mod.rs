//! Synthetic two-view reaching world with exactly known displacement dynamics.
//!
//! The agent is a disc that moves by clipped additive displacements inside the
//! unit square. Because the true transition between two states is a plain
//! position difference, it doubles as an exact oracle for the additivity and
//! reversibility probes.

mod dataset;
mod render;

pub use dataset::{frame_to_image, write_png_row, Dataset, EpisodeSplit};
pub use render::{render_view, CHANNELS};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{AlamError, Result};
use crate::rng::{rng_from, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Square frame side in pixels.
    pub resolution: usize,
    /// Per-axis bound on a single action, in arena widths.
    pub max_step: f64,
    /// Reaching tolerance (infinity norm) for expert and policy episodes.
    pub goal_eps: f64,
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub n_distractors: usize,
    pub wrist_zoom: f64,
    /// AR(1) coefficient of the random-velocity action process.
    pub velocity_decay: f64,
    /// Innovation gain of the action process (innovation std = gain * max_step).
    pub velocity_noise: f64,
    pub expert_max_steps: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            max_step: 0.05,
            goal_eps: 0.01,
            agent_radius: 0.07,
            goal_radius: 0.08,
            n_distractors: 3,
            wrist_zoom: 2.0,
            velocity_decay: 0.9,
            velocity_noise: 0.1,
            expert_max_steps: 64,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(AlamError::invalid("world.resolution must be positive"));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(AlamError::invalid("world.max_step must be positive"));
        }
        if self.wrist_zoom < 1.0 {
            return Err(AlamError::invalid("world.wrist_zoom must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Global,
    Wrist,
}

impl View {
    pub const ALL: [View; 2] = [View::Global, View::Wrist];

    pub fn index(self) -> usize {
        match self {
            View::Global => 0,
            View::Wrist => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Global => "global",
            View::Wrist => "wrist",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub shape: u8,
    pub pos: [f64; 2],
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub distractors: Vec<Distractor>,
    pub step_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionCmd {
    pub u: [f64; 2],
}

/// An `H x W x 3` image with values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub view: View,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn zeros(height: usize, width: usize, view: View) -> Self {
        Self { height, width, view, pixels: vec![0.0; height * width * CHANNELS] }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * CHANNELS + ch]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<WorldState>,
    /// Indexed by [`View::index`].
    pub frames: [Vec<Frame>; 2],
    pub actions: Vec<ActionCmd>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn frames(&self, view: View) -> &[Frame] {
        &self.frames[view.index()]
    }

    /// Renders both views of every state.
    pub fn from_states(states: Vec<WorldState>, actions: Vec<ActionCmd>, cfg: &WorldConfig) -> Self {
        let frames = View::ALL.map(|view| {
            states.iter().map(|s| render_view(s, view, cfg.resolution, cfg)).collect()
        });
        Self { states, frames, actions }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapRange {
    pub min: usize,
    pub max: usize,
}

impl GapRange {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min == 0 || max < min {
            return Err(AlamError::invalid(format!("invalid gap range {{{min}..{max}}}")));
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        self.max - self.min + 1
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub indices: (usize, usize, usize),
    pub gaps: (usize, usize),
    /// `(O_a, O_b, O_c)` per view, indexed by [`View::index`].
    pub frames: [[Frame; 3]; 2],
}

fn clip_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Advances the world by one action. Positions are clipped to the unit
/// square, never reflected.
pub fn step_dynamics(state: &WorldState, action: &ActionCmd) -> Result<WorldState> {
    if !action.u.iter().all(|v| v.is_finite()) {
        return Err(AlamError::invalid(format!("non-finite action {:?}", action.u)));
    }
    let mut next = state.clone();
    next.agent_pos = [
        clip_unit(state.agent_pos[0] + action.u[0]),
        clip_unit(state.agent_pos[1] + action.u[1]),
    ];
    next.step_index += 1;
    Ok(next)
}

/// The oracle transition between two states of one episode.
pub fn true_transition(from: &WorldState, to: &WorldState) -> [f64; 2] {
    [to.agent_pos[0] - from.agent_pos[0], to.agent_pos[1] - from.agent_pos[1]]
}

fn sample_scene(rng: &mut Rng, cfg: &WorldConfig) -> (Vec<Distractor>, [f64; 2], [f64; 2]) {
    let distractors = (0..cfg.n_distractors)
        .map(|_| Distractor {
            shape: rng.gen_range(0..3u8),
            pos: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
            size: rng.gen_range(0.05..0.09),
        })
        .collect();
    let agent = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let goal = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    (distractors, agent, goal)
}

/// Rolls out a random-velocity trajectory of `len` states.
pub fn sample_trajectory(seed: u64, len: usize, cfg: &WorldConfig) -> Result<Trajectory> {
    if len < 2 {
        return Err(AlamError::invalid(format!("trajectory length must be >= 2, got {len}")));
    }
    let mut rng = rng_from(seed);
    let (distractors, agent_pos, goal_pos) = sample_scene(&mut rng, cfg);
    let innovation = Normal::new(0.0, cfg.max_step).expect("positive std");
    let stationary_std =
        cfg.velocity_noise * cfg.max_step / (1.0 - cfg.velocity_decay * cfg.velocity_decay).max(1e-6).sqrt();
    let start = Normal::new(0.0, stationary_std.max(1e-12)).expect("positive std");
    let clip = |v: f64| v.clamp(-cfg.max_step, cfg.max_step);
    let mut vel = [clip(start.sample(&mut rng)), clip(start.sample(&mut rng))];

    let mut states = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len - 1);
    states.push(WorldState { agent_pos, goal_pos, distractors, step_index: 0 });
    for _ in 1..len {
        let action = ActionCmd { u: vel };
        let next = step_dynamics(states.last().expect("non-empty"), &action)?;
        actions.push(action);
        states.push(next);
        for v in vel.iter_mut() {
            *v = clip(cfg.velocity_decay * *v + cfg.velocity_noise * innovation.sample(&mut rng));
        }
    }
    Ok(Trajectory::from_states(states, actions, cfg))
}

/// The scripted reaching controller: per-axis `clip(goal - agent, max_step)`.
pub fn expert_action(state: &WorldState, max_step: f64) -> ActionCmd {
    let d = [state.goal_pos[0] - state.agent_pos[0], state.goal_pos[1] - state.agent_pos[1]];
    ActionCmd { u: d.map(|v| v.clamp(-max_step, max_step)) }
}

pub fn goal_reached(state: &WorldState, eps: f64) -> bool {
    (state.goal_pos[0] - state.agent_pos[0]).abs() <= eps
        && (state.goal_pos[1] - state.agent_pos[1]).abs() <= eps
}

/// Samples a random reaching scene for evaluation or demonstrations.
pub fn sample_reaching_start(seed: u64, cfg: &WorldConfig) -> WorldState {
    let mut rng = rng_from(seed);
    let (distractors, agent_pos, goal_pos) = sample_scene(&mut rng, cfg);
    WorldState { agent_pos, goal_pos, distractors, step_index: 0 }
}

/// Runs the scripted expert from `start` until the goal is reached or
/// `cfg.expert_max_steps` actions have been taken.
pub fn run_expert(start: WorldState, cfg: &WorldConfig) -> Result<(Trajectory, bool)> {
    let mut states = vec![start];
    let mut actions = Vec::new();
    loop {
        let current = states.last().expect("non-empty");
        if goal_reached(current, cfg.goal_eps) {
            return Ok((Trajectory::from_states(states, actions, cfg), true));
        }
        if actions.len() >= cfg.expert_max_steps {
            return Ok((Trajectory::from_states(states, actions, cfg), false));
        }
        let action = expert_action(current, cfg.max_step);
        let next = step_dynamics(current, &action)?;
        actions.push(action);
        states.push(next);
    }
}

pub fn generate_expert_episode(seed: u64, cfg: &WorldConfig) -> Result<(Trajectory, bool)> {
    run_expert(sample_reaching_start(seed, cfg), cfg)
}

/// Draws `(a, b, c)` with i.i.d. uniform gaps and a uniform start.
pub fn sample_triplet_indices(len: usize, rng: &mut Rng, gaps: GapRange) -> Result<(usize, usize, usize)> {
    if len < 2 * gaps.max + 1 {
        return Err(AlamError::invalid(format!(
            "trajectory of length {len} is too short for two gaps of up to {}",
            gaps.max
        )));
    }
    let g1 = rng.gen_range(gaps.min..=gaps.max);
    let g2 = rng.gen_range(gaps.min..=gaps.max);
    let a = rng.gen_range(0..len - g1 - g2);
    Ok((a, a + g1, a + g1 + g2))
}

pub fn make_triplet(traj: &Trajectory, rng: &mut Rng, gaps: GapRange) -> Result<TripletSample> {
    let (a, b, c) = sample_triplet_indices(traj.len(), rng, gaps)?;
    let frames = View::ALL.map(|view| {
        let f = traj.frames(view);
        [f[a].clone(), f[b].clone(), f[c].clone()]
    });
    Ok(TripletSample { indices: (a, b, c), gaps: (b - a, c - b), frames })
}

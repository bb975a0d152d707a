use super::{Distractor, Frame, View, WorldConfig, WorldState};

pub const CHANNELS: usize = 3;

const BACKGROUND: [f32; 3] = [0.08, 0.09, 0.11];
const AGENT: [f32; 3] = [0.95, 0.25, 0.2];
const GOAL: [f32; 3] = [0.2, 0.85, 0.35];
const DISTRACTOR_COLORS: [[f32; 3]; 3] = [[0.3, 0.45, 0.9], [0.85, 0.8, 0.25], [0.7, 0.4, 0.8]];
/// Inner radius of the goal ring relative to its outer radius.
const RING_INNER: f64 = 0.6;

/// World-space window `(origin, extent)` shown by a view.
fn viewport(state: &WorldState, view: View, cfg: &WorldConfig) -> ([f64; 2], f64) {
    match view {
        View::Global => ([0.0, 0.0], 1.0),
        View::Wrist => {
            let extent = 1.0 / cfg.wrist_zoom;
            let origin = state.agent_pos.map(|p| (p - extent / 2.0).clamp(0.0, 1.0 - extent));
            (origin, extent)
        }
    }
}

fn inside_distractor(d: &Distractor, x: f64, y: f64) -> bool {
    let dx = x - d.pos[0];
    let dy = y - d.pos[1];
    let h = d.size / 2.0;
    match d.shape {
        0 => dx.abs() <= h && dy.abs() <= h,
        1 => {
            // upward triangle with apex at the top of the bounding box
            dy <= h && dy >= -h && dx.abs() <= (dy + h) / 2.0
        }
        _ => (dx.abs() <= h && dy.abs() <= h / 3.0) || (dy.abs() <= h && dx.abs() <= h / 3.0),
    }
}

/// Renders one view of a state. Pixel `(r, c)` samples the world at its
/// center; shapes are hard-edged so the output is a pure function of the
/// inputs. Draw order: background, distractors, goal ring, agent.
pub fn render_view(state: &WorldState, view: View, resolution: usize, cfg: &WorldConfig) -> Frame {
    let mut frame = Frame::zeros(resolution, resolution, view);
    let (origin, extent) = viewport(state, view, cfg);
    let scale = extent / resolution as f64;
    let agent_r2 = cfg.agent_radius * cfg.agent_radius;
    let goal_outer2 = cfg.goal_radius * cfg.goal_radius;
    let goal_inner2 = goal_outer2 * RING_INNER * RING_INNER;
    for row in 0..resolution {
        let y = origin[1] + (row as f64 + 0.5) * scale;
        for col in 0..resolution {
            let x = origin[0] + (col as f64 + 0.5) * scale;
            let mut color = BACKGROUND;
            for d in &state.distractors {
                if inside_distractor(d, x, y) {
                    color = DISTRACTOR_COLORS[d.shape as usize % DISTRACTOR_COLORS.len()];
                }
            }
            let gd2 = (x - state.goal_pos[0]).powi(2) + (y - state.goal_pos[1]).powi(2);
            if gd2 <= goal_outer2 && gd2 >= goal_inner2 {
                color = GOAL;
            }
            let ad2 = (x - state.agent_pos[0]).powi(2) + (y - state.agent_pos[1]).powi(2);
            if ad2 <= agent_r2 {
                color = AGENT;
            }
            let base = (row * resolution + col) * CHANNELS;
            frame.pixels[base..base + CHANNELS].copy_from_slice(&color);
        }
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(agent: [f64; 2]) -> WorldState {
        WorldState {
            agent_pos: agent,
            goal_pos: [0.2, 0.75],
            distractors: vec![
                Distractor { shape: 0, pos: [0.8, 0.2], size: 0.1 },
                Distractor { shape: 1, pos: [0.3, 0.3], size: 0.1 },
                Distractor { shape: 2, pos: [0.7, 0.8], size: 0.1 },
            ],
            step_index: 0,
        }
    }

    fn is_agent(f: &Frame, r: usize, c: usize) -> bool {
        (0..3).all(|ch| f.at(r, c, ch) == AGENT[ch])
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = WorldConfig::default();
        for view in View::ALL {
            let a = render_view(&scene([0.4, 0.6]), view, 64, &cfg);
            let b = render_view(&scene([0.4, 0.6]), view, 64, &cfg);
            assert_eq!(a.pixels, b.pixels);
            assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn centered_agent_centroid() {
        let cfg = WorldConfig::default();
        let f = render_view(&scene([0.5, 0.5]), View::Global, 64, &cfg);
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for r in 0..64 {
            for c in 0..64 {
                if is_agent(&f, r, c) {
                    sr += r as f64 + 0.5;
                    sc += c as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0);
        assert!((sr / n - 32.0).abs() <= 1.0 && (sc / n - 32.0).abs() <= 1.0);
    }

    #[test]
    fn agent_motion_is_local() {
        let cfg = WorldConfig::default();
        let res = 64;
        let (p, q) = ([0.45, 0.5], [0.55, 0.52]);
        let a = render_view(&scene(p), View::Global, res, &cfg);
        let b = render_view(&scene(q), View::Global, res, &cfg);
        assert_ne!(a.pixels, b.pixels);
        let in_box = |pos: [f64; 2], r: usize, c: usize| {
            let x = (c as f64 + 0.5) / res as f64;
            let y = (r as f64 + 0.5) / res as f64;
            (x - pos[0]).abs() <= cfg.agent_radius && (y - pos[1]).abs() <= cfg.agent_radius
        };
        for r in 0..res {
            for c in 0..res {
                let differs = (0..3).any(|ch| a.at(r, c, ch) != b.at(r, c, ch));
                if differs {
                    assert!(in_box(p, r, c) || in_box(q, r, c), "pixel ({r},{c}) changed outside disc boxes");
                }
            }
        }
    }

    #[test]
    fn wrist_view_follows_agent_and_clamps() {
        let cfg = WorldConfig::default();
        let f = render_view(&scene([0.5, 0.5]), View::Wrist, 32, &cfg);
        // 2x zoom keeps the agent centered with twice the pixel radius
        assert!(is_agent(&f, 16, 16));
        assert!(is_agent(&f, 15, 15));
        let corner = render_view(&scene([0.02, 0.02]), View::Wrist, 32, &cfg);
        assert!(is_agent(&corner, 0, 0));
        assert!(!is_agent(&corner, 16, 16));
    }
}

//! Point-mass reacher with a randomized goal.
//!
//! A point mass moves in the square arena `[−1, 1]²` under
//! `p̈ = u·F_max/m − c·ṗ`, `u ∈ [−1, 1]²`. Walls stop the mass along the
//! axis it hits; each velocity component is clamped to `max_speed`. The reward
//! is `exp(−(d/reward_scale)²)` with `d` the distance to the goal. Each
//! episode draws the start position and the goal independently and uniformly
//! from `[−0.8, 0.8]²`, starting at rest.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::Canvas;
use super::{kick_drift_kick, Task};
use crate::frame::Frame;

const ARENA: f64 = 1.0;
const SPAWN: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReacherParams {
    /// kg.
    pub mass: f64,
    /// N at `|u| = 1`, per axis.
    pub max_force: f64,
    /// 1/s.
    pub damping: f64,
    /// m/s, per axis.
    pub max_speed: f64,
    /// m.
    pub reward_scale: f64,
}

impl Default for ReacherParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            max_force: 4.0,
            damping: 1.0,
            max_speed: 2.0,
            reward_scale: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReacherState {
    /// m.
    pub pos: [f64; 2],
    /// m/s.
    pub vel: [f64; 2],
    /// m.
    pub goal: [f64; 2],
}

impl Task for ReacherParams {
    type State = ReacherState;

    fn action_dim(&self) -> usize {
        2
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> ReacherState {
        let mut draw = || [rng.random_range(-SPAWN..SPAWN), rng.random_range(-SPAWN..SPAWN)];
        let pos = draw();
        let goal = draw();
        ReacherState {
            pos,
            vel: [0.0; 2],
            goal,
        }
    }

    fn substep(&self, s: &ReacherState, u: &[f64], dt: f64) -> ReacherState {
        let (mut pos, mut vel) = kick_drift_kick(s.pos, s.vel, dt, |_, v| {
            [0, 1].map(|i| u[i] * self.max_force / self.mass - self.damping * v[i])
        });
        for i in 0..2 {
            vel[i] = vel[i].clamp(-self.max_speed, self.max_speed);
            if pos[i].abs() > ARENA {
                pos[i] = pos[i].clamp(-ARENA, ARENA);
                vel[i] = 0.0;
            }
        }
        ReacherState { pos, vel, goal: s.goal }
    }

    fn reward(&self, s: &ReacherState) -> f64 {
        let d2 = (s.pos[0] - s.goal[0]).powi(2) + (s.pos[1] - s.goal[1]).powi(2);
        (-d2 / (self.reward_scale * self.reward_scale)).exp()
    }

    fn render(&self, s: &ReacherState, frame: &mut Frame) {
        let mut c = Canvas::new(frame, (0.0, 0.0), ARENA + 0.1);
        c.fill([60, 60, 66]);
        c.rect((0.0, 0.0), ARENA, ARENA, [16, 18, 22]);
        c.circle((s.goal[0], s.goal[1]), 0.11, [220, 50, 50]);
        c.circle((s.pos[0], s.pos[1]), 0.08, [80, 200, 255]);
    }
}

//! Torque-limited pendulum swing-up.
//!
//! `θ` is the angle from upright, positive clockwise as seen on screen, so
//! the bob sits at `(l·sinθ, l·cosθ)`. Equation of motion:
//!
//! ```text
//! θ̈ = (g/l)·sinθ + u·τ_max/(m·l²) − c·θ̇
//! ```
//!
//! with `u ∈ [−1, 1]`. `θ` is kept in `(−π, π]` and `|θ̇| ≤ max_speed`.
//! The reward `(1 + cosθ)/2` is 1 upright and 0 hanging straight down.
//! Episodes start at rest with `θ` uniform over `[−π, π)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::Canvas;
use super::{kick_drift_kick, wrap_angle, Task};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    /// m/s².
    pub gravity: f64,
    /// m.
    pub length: f64,
    /// kg.
    pub mass: f64,
    /// 1/s.
    pub damping: f64,
    /// N·m at `|u| = 1`.
    pub max_torque: f64,
    /// rad/s.
    pub max_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            length: 1.0,
            mass: 1.0,
            damping: 0.1,
            max_torque: 2.0,
            max_speed: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    /// rad.
    pub theta: f64,
    /// rad/s.
    pub theta_dot: f64,
}

impl PendulumParams {
    fn accel(&self, theta: f64, theta_dot: f64, u: f64) -> f64 {
        let (g, l, m) = (self.gravity, self.length, self.mass);
        (g / l) * theta.sin() + u * self.max_torque / (m * l * l) - self.damping * theta_dot
    }

    /// Kinetic plus potential energy, zero when hanging at rest.
    pub fn energy(&self, s: &PendulumState) -> f64 {
        let (g, l, m) = (self.gravity, self.length, self.mass);
        0.5 * m * l * l * s.theta_dot * s.theta_dot + m * g * l * (1.0 + s.theta.cos())
    }
}

impl Task for PendulumParams {
    type State = PendulumState;

    fn action_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> PendulumState {
        PendulumState {
            theta: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            theta_dot: 0.0,
        }
    }

    fn substep(&self, s: &PendulumState, u: &[f64], dt: f64) -> PendulumState {
        let ([theta], [theta_dot]) =
            kick_drift_kick([s.theta], [s.theta_dot], dt, |q, v| [self.accel(q[0], v[0], u[0])]);
        PendulumState {
            theta: wrap_angle(theta),
            theta_dot: theta_dot.clamp(-self.max_speed, self.max_speed),
        }
    }

    fn reward(&self, s: &PendulumState) -> f64 {
        (1.0 + s.theta.cos()) / 2.0
    }

    fn render(&self, s: &PendulumState, frame: &mut Frame) {
        let l = self.length;
        let mut c = Canvas::new(frame, (0.0, 0.0), 1.3 * l);
        c.fill([24, 26, 40]);
        let tip = (l * s.theta.sin(), l * s.theta.cos());
        c.capsule((0.0, 0.0), tip, 0.08 * l, [225, 120, 40]);
        c.circle(tip, 0.17 * l, [245, 215, 70]);
        c.circle((0.0, 0.0), 0.06 * l, [190, 190, 200]);
    }
}

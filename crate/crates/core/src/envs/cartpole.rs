//! Cart-pole swing-up on a bounded rail.
//!
//! `θ` is the pole angle from upright (tip at `x + 2l·sinθ`), `l` the pole
//! half-length, `M = m_c + m_p` and `F = u·F_max`. Equations of motion:
//!
//! ```text
//! θ̈ = [g·sinθ − cosθ·(F + m_p·l·θ̇²·sinθ)/M] / [l·(4/3 − m_p·cos²θ/M)] − c_p·θ̇
//! ẍ = [F + m_p·l·(θ̇²·sinθ − θ̈·cosθ)]/M − c_c·ẋ
//! ```
//!
//! The cart stops dead at `|x| = rail_limit`. Speeds are clamped to
//! `max_cart_speed` and `max_pole_speed`. The reward is
//! `(1 + cosθ)/2 · (1 + (1 + cos(π·x/rail_limit))/2)/2`: uprightness, halved
//! at the rail ends. Episodes start at rest near the bottom:
//! `θ = π + U(−0.1, 0.1)`, `x = U(−0.25, 0.25)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::Canvas;
use super::{kick_drift_kick, wrap_angle, Task};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleParams {
    /// m/s².
    pub gravity: f64,
    /// kg.
    pub cart_mass: f64,
    /// kg.
    pub pole_mass: f64,
    /// m.
    pub pole_half_length: f64,
    /// N at `|u| = 1`.
    pub max_force: f64,
    /// 1/s.
    pub cart_damping: f64,
    /// 1/s.
    pub pole_damping: f64,
    /// m.
    pub rail_limit: f64,
    /// m/s.
    pub max_cart_speed: f64,
    /// rad/s.
    pub max_pole_speed: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            max_force: 10.0,
            cart_damping: 0.1,
            pole_damping: 0.01,
            rail_limit: 1.8,
            max_cart_speed: 5.0,
            max_pole_speed: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartpoleState {
    /// m.
    pub x: f64,
    /// m/s.
    pub x_dot: f64,
    /// rad.
    pub theta: f64,
    /// rad/s.
    pub theta_dot: f64,
}

impl CartpoleParams {
    /// `[ẍ, θ̈]`.
    fn accel(&self, q: [f64; 2], v: [f64; 2], u: f64) -> [f64; 2] {
        let (mp, l) = (self.pole_mass, self.pole_half_length);
        let total = self.cart_mass + mp;
        let force = u * self.max_force;
        let (sin, cos) = q[1].sin_cos();
        let tmp = (force + mp * l * v[1] * v[1] * sin) / total;
        let theta_acc = (self.gravity * sin - cos * tmp) / (l * (4.0 / 3.0 - mp * cos * cos / total));
        let x_acc = tmp - mp * l * theta_acc * cos / total;
        [x_acc - self.cart_damping * v[0], theta_acc - self.pole_damping * v[1]]
    }
}

impl Task for CartpoleParams {
    type State = CartpoleState;

    fn action_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> CartpoleState {
        CartpoleState {
            x: rng.random_range(-0.25..0.25),
            x_dot: 0.0,
            theta: wrap_angle(PI + rng.random_range(-0.1..0.1)),
            theta_dot: 0.0,
        }
    }

    fn substep(&self, s: &CartpoleState, u: &[f64], dt: f64) -> CartpoleState {
        let (q, v) = kick_drift_kick([s.x, s.theta], [s.x_dot, s.theta_dot], dt, |q, v| {
            self.accel(q, v, u[0])
        });
        let mut x = q[0];
        let mut x_dot = v[0].clamp(-self.max_cart_speed, self.max_cart_speed);
        if x.abs() > self.rail_limit {
            x = x.clamp(-self.rail_limit, self.rail_limit);
            x_dot = 0.0;
        }
        CartpoleState {
            x,
            x_dot,
            theta: wrap_angle(q[1]),
            theta_dot: v[1].clamp(-self.max_pole_speed, self.max_pole_speed),
        }
    }

    fn reward(&self, s: &CartpoleState) -> f64 {
        let upright = (1.0 + s.theta.cos()) / 2.0;
        let centered = (1.0 + (PI * s.x / self.rail_limit).cos()) / 2.0;
        upright * (1.0 + centered) / 2.0
    }

    fn render(&self, s: &CartpoleState, frame: &mut Frame) {
        let pole = 2.0 * self.pole_half_length;
        let mut c = Canvas::new(frame, (0.0, 0.0), self.rail_limit + 0.4);
        c.fill([30, 36, 30]);
        c.rect((0.0, 0.0), self.rail_limit + 0.25, 0.02, [120, 120, 120]);
        c.rect((s.x, 0.0), 0.25, 0.125, [70, 140, 220]);
        let tip = (s.x + pole * s.theta.sin(), pole * s.theta.cos());
        c.capsule((s.x, 0.0), tip, 0.06, [230, 180, 60]);
        c.circle((s.x, 0.0), 0.05, [240, 240, 240]);
    }
}

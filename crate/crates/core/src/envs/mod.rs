//! Pixel-observation control tasks.
//!
//! Each task is 2-D rigid-body dynamics rendered to a square RGB frame.
//! [`PixelEnv`] adds the observation interface shared by all tasks: action
//! repeat, frame stacking, reward normalization and a fixed episode length
//! counted in environment steps (physics sub-steps).

mod cartpole;
mod pendulum;
mod raster;
mod reacher;

use std::collections::VecDeque;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cartpole::{CartpoleParams, CartpoleState};
pub use pendulum::{PendulumParams, PendulumState};
pub use raster::{Canvas, Rgb};
pub use reacher::{ReacherParams, ReacherState};

use crate::error::{Error, Result};
use crate::frame::{Frame, StackedObservation, FRAME_CHANNELS};

/// Dynamics, reward and rendering of one task.
pub trait Task: Clone + Send + Sync + 'static {
    type State: Clone + fmt::Debug + PartialEq + Send;

    fn action_dim(&self) -> usize;
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Self::State;
    /// Advances the state by `dt` under actions already clipped to `[−1, 1]`.
    fn substep(&self, state: &Self::State, action: &[f64], dt: f64) -> Self::State;
    /// Per-sub-step reward in `[0, 1]`.
    fn reward(&self, state: &Self::State) -> f64;
    fn render(&self, state: &Self::State, frame: &mut Frame);
}

/// One semi-implicit Euler step with the velocity update split in half
/// around the position update.
pub(crate) fn kick_drift_kick<const N: usize>(
    q: [f64; N],
    v: [f64; N],
    dt: f64,
    accel: impl Fn([f64; N], [f64; N]) -> [f64; N],
) -> ([f64; N], [f64; N]) {
    let a0 = accel(q, v);
    let v_half: [f64; N] = std::array::from_fn(|i| v[i] + 0.5 * dt * a0[i]);
    let q1: [f64; N] = std::array::from_fn(|i| q[i] + dt * v_half[i]);
    let a1 = accel(q1, v_half);
    let v1 = std::array::from_fn(|i| v_half[i] + 0.5 * dt * a1[i]);
    (q1, v1)
}

/// Maps an angle into `(−π, π]`.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    PI - (PI - theta).rem_euclid(TAU)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Pendulum,
    Cartpole,
    Reacher,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Pendulum, TaskId::Cartpole, TaskId::Reacher];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Pendulum => "pendulum",
            TaskId::Cartpole => "cartpole",
            TaskId::Reacher => "reacher",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task '{s}' (expected pendulum, cartpole or reacher)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: TaskId,
    /// Frame side in pixels.
    pub render_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Episode length in environment steps.
    pub episode_steps: usize,
    /// Physics sub-step, seconds.
    pub dt: f64,
    /// Base seed for initial-state draws.
    pub seed: u64,
    pub pendulum: PendulumParams,
    pub cartpole: CartpoleParams,
    pub reacher: ReacherParams,
    /// When set, every rendered frame is written here as a PNG.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_frames: Option<PathBuf>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Pendulum,
            render_size: 84,
            frame_stack: 3,
            action_repeat: 2,
            episode_steps: 1000,
            dt: 0.02,
            seed: 0,
            pendulum: PendulumParams::default(),
            cartpole: CartpoleParams::default(),
            reacher: ReacherParams::default(),
            dump_frames: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.action_repeat == 0 {
            return Err(Error::config("action_repeat must be at least 1"));
        }
        if self.episode_steps == 0 || self.episode_steps % self.action_repeat != 0 {
            return Err(Error::config(format!(
                "episode_steps {} must be a positive multiple of action_repeat {}",
                self.episode_steps, self.action_repeat
            )));
        }
        if self.frame_stack == 0 {
            return Err(Error::config("frame_stack must be at least 1"));
        }
        if self.render_size < 8 {
            return Err(Error::config(format!("render_size {} below 8 pixels", self.render_size)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("physics dt {} must be positive", self.dt)));
        }
        Ok(())
    }

    /// Actor steps per episode.
    pub fn actor_steps(&self) -> usize {
        self.episode_steps / self.action_repeat
    }

    pub fn action_dim(&self) -> usize {
        match self.task {
            TaskId::Pendulum => self.pendulum.action_dim(),
            TaskId::Cartpole => self.cartpole.action_dim(),
            TaskId::Reacher => self.reacher.action_dim(),
        }
    }

    /// `[frame_stack·3, size, size]`.
    pub fn observation_shape(&self) -> [usize; 3] {
        [self.frame_stack * FRAME_CHANNELS, self.render_size, self.render_size]
    }
}

/// Result of one actor step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: StackedObservation,
    /// Mean sub-step reward, in `[0, 1]`.
    pub reward: f32,
    /// True on the last step of the episode, and only there.
    pub step_budget_exhausted: bool,
}

/// The interface the agent and harness see.
pub trait Environment: Send {
    fn config(&self) -> &EnvConfig;
    fn action_dim(&self) -> usize;
    /// Starts an episode; the observation repeats the first frame.
    fn reset(&mut self, seed: u64) -> StackedObservation;
    fn step(&mut self, action: &[f32]) -> Result<Step>;
    /// The most recent frame.
    fn frame(&self) -> Option<&Frame>;
    /// Environment steps taken in the current episode.
    fn episode_frames(&self) -> u64;
    /// Environment steps taken over the environment's lifetime.
    fn total_frames(&self) -> u64;
}

/// Builds the environment named by `config.task`.
pub fn make_env(config: &EnvConfig) -> Result<Box<dyn Environment>> {
    config.validate()?;
    Ok(match config.task {
        TaskId::Pendulum => Box::new(PixelEnv::new(config.pendulum, config.clone())?),
        TaskId::Cartpole => Box::new(PixelEnv::new(config.cartpole, config.clone())?),
        TaskId::Reacher => Box::new(PixelEnv::new(config.reacher, config.clone())?),
    })
}

pub struct PixelEnv<T: Task> {
    task: T,
    config: EnvConfig,
    state: Option<T::State>,
    frames: VecDeque<Frame>,
    episode_frames: u64,
    total_frames: u64,
    active: bool,
    dumped: u64,
}

impl<T: Task> PixelEnv<T> {
    pub fn new(task: T, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if let Some(dir) = &config.dump_frames {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            task,
            frames: VecDeque::with_capacity(config.frame_stack),
            config,
            state: None,
            episode_frames: 0,
            total_frames: 0,
            active: false,
            dumped: 0,
        })
    }

    pub fn task(&self) -> &T {
        &self.task
    }

    /// The physical state behind the pixels.
    pub fn state(&self) -> Option<&T::State> {
        self.state.as_ref()
    }

    /// Replaces the physical state of an active episode and re-renders.
    pub fn set_state(&mut self, state: T::State) -> Result<StackedObservation> {
        if !self.active {
            return Err(Error::contract("set_state needs an active episode"));
        }
        let frame = self.render(&state);
        self.state = Some(state);
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(frame.clone());
        }
        Ok(self.observation())
    }

    pub fn render(&self, state: &T::State) -> Frame {
        let mut frame = Frame::blank(self.config.render_size);
        self.task.render(state, &mut frame);
        frame
    }

    fn observation(&self) -> StackedObservation {
        StackedObservation::from_frames(&self.frames)
    }

    fn dump(&mut self, frame: &Frame) {
        let Some(dir) = &self.config.dump_frames else {
            return;
        };
        let path = dir.join(format!("frame_{:07}.png", self.dumped));
        if let Err(e) = frame.save_png(&path) {
            log::warn!("frame dump to {} failed: {e}", path.display());
        }
        self.dumped += 1;
    }
}

impl<T: Task> Environment for PixelEnv<T> {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn action_dim(&self) -> usize {
        self.task.action_dim()
    }

    fn reset(&mut self, seed: u64) -> StackedObservation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = self.task.initial_state(&mut rng);
        let frame = self.render(&state);
        self.dump(&frame);
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(frame.clone());
        }
        self.state = Some(state);
        self.episode_frames = 0;
        self.active = true;
        self.observation()
    }

    fn step(&mut self, action: &[f32]) -> Result<Step> {
        if !self.active {
            return Err(Error::contract("step called on a finished or unstarted episode"));
        }
        if action.len() != self.task.action_dim() {
            return Err(Error::contract(format!(
                "action has {} entries, task expects {}",
                action.len(),
                self.task.action_dim()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::contract(format!("non-finite action {action:?}")));
        }
        let u: Vec<f64> = action.iter().map(|&a| (a as f64).clamp(-1.0, 1.0)).collect();
        let mut state = self.state.take().expect("active episode has a state");
        let mut reward = 0.0;
        let repeat = self.config.action_repeat;
        for _ in 0..repeat {
            state = self.task.substep(&state, &u, self.config.dt);
            reward += self.task.reward(&state);
        }
        let reward = reward.clamp(0.0, repeat as f64) / repeat as f64;
        let frame = self.render(&state);
        self.dump(&frame);
        self.state = Some(state);
        self.frames.pop_front();
        self.frames.push_back(frame);
        self.episode_frames += repeat as u64;
        self.total_frames += repeat as u64;
        let done = self.episode_frames >= self.config.episode_steps as u64;
        if done {
            self.active = false;
        }
        Ok(Step {
            obs: self.observation(),
            reward: reward as f32,
            step_budget_exhausted: done,
        })
    }

    fn frame(&self) -> Option<&Frame> {
        self.frames.back()
    }

    fn episode_frames(&self) -> u64 {
        self.episode_frames
    }

    fn total_frames(&self) -> u64 {
        self.total_frames
    }
}

//! Episodic replay buffer with n-step sampling.
//!
//! Every environment frame is stored exactly once, as 8-bit pixels, inside the
//! episode it belongs to. Stacked observations are rebuilt from consecutive
//! frames at sample time, so a stack of `k` frames costs `1/k` of the memory
//! of storing stacks directly. The discounted n-step reward sums are computed
//! once when an episode is committed.
//!
//! Episode layout: `frames[0]` is the reset frame and step `t` moves the
//! environment from `frames[t]` to `frames[t + 1]` under `actions[t]`,
//! earning `rewards[t]`.

mod episode_file;

use std::collections::VecDeque;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use episode_file::{read_episode, write_episode, EPISODE_MAGIC};

use crate::error::{Error, Result};
use crate::frame::{Frame, StackedObservation, FRAME_CHANNELS};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Maximum number of stored steps (transitions).
    pub capacity: usize,
    /// n-step horizon.
    pub nstep: usize,
    pub gamma: f64,
    pub frame_stack: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            capacity: 1_000_000,
            nstep: 3,
            gamma: 0.99,
            frame_stack: 3,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("replay capacity must be at least 1"));
        }
        if self.nstep == 0 {
            return Err(Error::config("n-step horizon must be at least 1"));
        }
        if self.frame_stack == 0 {
            return Err(Error::config("frame_stack must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("discount {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// A complete trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    frame_size: usize,
    action_dim: usize,
    /// `(len + 1)` frames back to back.
    frames: Vec<u8>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
}

impl Episode {
    pub fn new(initial: &Frame, action_dim: usize) -> Self {
        Self {
            frame_size: initial.size(),
            action_dim,
            frames: initial.bytes().to_vec(),
            actions: Vec::new(),
            rewards: Vec::new(),
        }
    }

    /// Assembles an episode from raw parts, checking every invariant.
    pub fn from_parts(
        frame_size: usize,
        action_dim: usize,
        frames: Vec<u8>,
        actions: Vec<f32>,
        rewards: Vec<f32>,
    ) -> Result<Self> {
        let len = rewards.len();
        let frame_len = FRAME_CHANNELS * frame_size * frame_size;
        if frames.len() != (len + 1) * frame_len || actions.len() != len * action_dim {
            return Err(Error::contract(format!(
                "episode parts inconsistent: {len} rewards, {} actions, {} frame bytes",
                actions.len(),
                frames.len()
            )));
        }
        check_reward_range(&rewards)?;
        Ok(Self {
            frame_size,
            action_dim,
            frames,
            actions,
            rewards,
        })
    }

    pub fn push(&mut self, next_frame: &Frame, action: &[f32], reward: f32) -> Result<()> {
        if next_frame.size() != self.frame_size {
            return Err(Error::contract(format!(
                "frame side {} does not match episode side {}",
                next_frame.size(),
                self.frame_size
            )));
        }
        if action.len() != self.action_dim {
            return Err(Error::contract(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.action_dim
            )));
        }
        check_reward_range(&[reward])?;
        self.frames.extend_from_slice(next_frame.bytes());
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        Ok(())
    }

    /// Number of steps.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub(crate) fn raw_frames(&self) -> &[u8] {
        &self.frames
    }

    pub(crate) fn raw_actions(&self) -> &[f32] {
        &self.actions
    }

    fn frame_len(&self) -> usize {
        FRAME_CHANNELS * self.frame_size * self.frame_size
    }

    /// Observation at time `t`: frames `t − k + 1 ..= t`, with the reset
    /// frame repeated where the window reaches before the episode start.
    pub fn stacked_obs(&self, t: usize, frame_stack: usize) -> Result<StackedObservation> {
        if t > self.len() {
            return Err(Error::contract(format!(
                "observation index {t} outside episode of length {}",
                self.len()
            )));
        }
        let frames: Vec<Frame> = stack_indices(t, frame_stack)
            .map(|i| Frame::new(self.frame_size, self.frame_bytes(i).to_vec()).expect("stored frame"))
            .collect();
        Ok(StackedObservation::from_frames(&frames))
    }

    /// Heap bytes held by this episode.
    pub fn heap_bytes(&self) -> usize {
        self.frames.capacity()
            + self.actions.capacity() * std::mem::size_of::<f32>()
            + self.rewards.capacity() * std::mem::size_of::<f32>()
    }

    fn shrink(&mut self) {
        self.frames.shrink_to_fit();
        self.actions.shrink_to_fit();
        self.rewards.shrink_to_fit();
    }
}

fn check_reward_range(rewards: &[f32]) -> Result<()> {
    if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::contract(format!("reward {r} outside [0, 1]")));
    }
    Ok(())
}

fn stack_indices(t: usize, frame_stack: usize) -> impl Iterator<Item = usize> {
    (0..frame_stack).map(move |k| (t + k + 1).saturating_sub(frame_stack))
}

/// A committed episode with its precomputed n-step returns.
#[derive(Debug)]
struct Stored {
    episode: Episode,
    /// `Σ_{i<n} γ^i r_{t+i}` for every valid start `t`.
    returns: Vec<f32>,
}

/// Mini-batch of n-step transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepBatch<S: Scalar> {
    /// `[B, k·3, H, W]`, stack at `t`.
    pub obs: Tensor<S>,
    /// `[B, A]`.
    pub action: Tensor<S>,
    /// Discounted n-step reward sums.
    pub reward: Vec<S>,
    /// `γ^n` for every row.
    pub discount: Vec<S>,
    /// `[B, k·3, H, W]`, stack at `t + n`.
    pub next_obs: Tensor<S>,
}

impl<S: Scalar> NStepBatch<S> {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

/// Where a sampled row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    /// Sequence number of the episode since the buffer was created.
    pub episode_id: u64,
    pub t: usize,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    config: BufferConfig,
    episodes: VecDeque<Stored>,
    /// Sequence number of `episodes[0]`.
    first_id: u64,
    /// Cumulative valid-window counts; `prefix[i]` covers episodes `..=i`.
    prefix: Vec<usize>,
    stored_steps: usize,
    open: Option<Episode>,
}

impl ReplayBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            episodes: VecDeque::new(),
            first_id: 0,
            prefix: Vec::new(),
            stored_steps: 0,
            open: None,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    /// Opens a new episode with its reset frame, discarding any unfinished
    /// one.
    pub fn start_episode(&mut self, initial: &Frame, action_dim: usize) {
        self.open = Some(Episode::new(initial, action_dim));
    }

    pub fn add_step(&mut self, next_frame: &Frame, action: &[f32], reward: f32) -> Result<()> {
        let capacity = self.config.capacity;
        let Some(ep) = self.open.as_mut() else {
            return Err(Error::contract("add_step called with no open episode"));
        };
        if ep.len() + 1 > capacity {
            return Err(Error::contract(format!(
                "episode longer than replay capacity {capacity}"
            )));
        }
        ep.push(next_frame, action, reward)
    }

    /// The episode being collected, if any.
    pub fn open_episode(&self) -> Option<&Episode> {
        self.open.as_ref()
    }

    /// Commits the open episode, making it sampleable.
    pub fn end_episode(&mut self) -> Result<()> {
        let Some(ep) = self.open.take() else {
            return Err(Error::contract("end_episode called with no open episode"));
        };
        self.insert_episode(ep)
    }

    /// Commits a finished episode, evicting the oldest whole episodes while
    /// the step count exceeds capacity.
    pub fn insert_episode(&mut self, mut episode: Episode) -> Result<()> {
        if episode.len() > self.config.capacity {
            return Err(Error::contract(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.config.capacity
            )));
        }
        if let Some(first) = self.episodes.front() {
            let f = &first.episode;
            if (f.frame_size, f.action_dim) != (episode.frame_size, episode.action_dim) {
                return Err(Error::contract(format!(
                    "episode geometry (side {}, action dim {}) differs from stored (side {}, action dim {})",
                    episode.frame_size, episode.action_dim, f.frame_size, f.action_dim
                )));
            }
        }
        episode.shrink();
        let returns = nstep_returns(episode.rewards(), self.config.nstep, self.config.gamma);
        self.stored_steps += episode.len();
        self.episodes.push_back(Stored { episode, returns });
        while self.stored_steps > self.config.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.stored_steps -= old.episode.len();
            self.first_id += 1;
        }
        self.rebuild_prefix();
        Ok(())
    }

    fn rebuild_prefix(&mut self) {
        let mut acc = 0;
        self.prefix = self
            .episodes
            .iter()
            .map(|s| {
                acc += s.returns.len();
                acc
            })
            .collect();
    }

    /// Committed steps.
    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|s| &s.episode)
    }

    /// Number of `(episode, t)` pairs a sample can draw from.
    pub fn valid_windows(&self) -> usize {
        self.prefix.last().copied().unwrap_or(0)
    }

    pub fn is_ready(&self) -> bool {
        self.valid_windows() > 0
    }

    /// Heap bytes used by committed episodes (frames, actions, rewards and
    /// precomputed returns).
    pub fn stored_bytes(&self) -> usize {
        self.episodes
            .iter()
            .map(|s| s.episode.heap_bytes() + s.returns.capacity() * std::mem::size_of::<f32>())
            .sum()
    }

    pub fn stacked_obs(&self, episode_id: u64, t: usize) -> Result<StackedObservation> {
        let idx = episode_id
            .checked_sub(self.first_id)
            .map(|i| i as usize)
            .filter(|&i| i < self.episodes.len())
            .ok_or_else(|| Error::contract(format!("episode {episode_id} not in buffer")))?;
        self.episodes[idx].episode.stacked_obs(t, self.config.frame_stack)
    }

    /// Draws `batch_size` transitions uniformly over all valid windows.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<SampleIndex>> {
        let total = self.valid_windows();
        if total == 0 {
            return Err(Error::NotReady(format!(
                "no stored episode has at least {} steps",
                self.config.nstep
            )));
        }
        Ok((0..batch_size)
            .map(|_| {
                let g = rng.random_range(0..total);
                let ep = self.prefix.partition_point(|&p| p <= g);
                let before = if ep == 0 { 0 } else { self.prefix[ep - 1] };
                SampleIndex {
                    episode_id: self.first_id + ep as u64,
                    t: g - before,
                }
            })
            .collect())
    }

    pub fn sample<S: Scalar, R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<NStepBatch<S>> {
        let idx = self.sample_indices(batch_size, rng)?;
        self.gather(&idx)
    }

    /// Materializes the rows named by `indices`.
    pub fn gather<S: Scalar>(&self, indices: &[SampleIndex]) -> Result<NStepBatch<S>> {
        let first = &self
            .episodes
            .front()
            .ok_or_else(|| Error::NotReady("buffer is empty".into()))?
            .episode;
        let (side, adim) = (first.frame_size, first.action_dim);
        let k = self.config.frame_stack;
        let frame_len = FRAME_CHANNELS * side * side;
        let b = indices.len();
        let n = self.config.nstep;
        let discount = S::from_f64(self.config.gamma.powi(n as i32));
        let lut: Vec<S> = (0..256).map(|v| S::from_f64(v as f64 / 255.0)).collect();

        let mut obs = Vec::with_capacity(b * k * frame_len);
        let mut next_obs = Vec::with_capacity(b * k * frame_len);
        let mut action = Vec::with_capacity(b * adim);
        let mut reward = Vec::with_capacity(b);
        for ix in indices {
            let pos = ix
                .episode_id
                .checked_sub(self.first_id)
                .map(|i| i as usize)
                .filter(|&i| i < self.episodes.len())
                .ok_or_else(|| Error::contract(format!("episode {} not in buffer", ix.episode_id)))?;
            let st = &self.episodes[pos];
            if ix.t >= st.returns.len() {
                return Err(Error::contract(format!(
                    "window start {} invalid for episode of length {}",
                    ix.t,
                    st.episode.len()
                )));
            }
            for i in stack_indices(ix.t, k) {
                obs.extend(st.episode.frame_bytes(i).iter().map(|&p| lut[p as usize]));
            }
            for i in stack_indices(ix.t + n, k) {
                next_obs.extend(st.episode.frame_bytes(i).iter().map(|&p| lut[p as usize]));
            }
            action.extend(st.episode.action(ix.t).iter().map(|&a| S::from_f64(a as f64)));
            reward.push(S::from_f64(st.returns[ix.t] as f64));
        }
        let shape = [b, k * FRAME_CHANNELS, side, side];
        Ok(NStepBatch {
            obs: Tensor::new(shape.to_vec(), obs)?,
            action: Tensor::new(vec![b, adim], action)?,
            reward,
            discount: vec![discount; b],
            next_obs: Tensor::new(shape.to_vec(), next_obs)?,
        })
    }
}

/// `Σ_{i<n} γ^i r_{t+i}` for `t = 0 ..= len − n`.
fn nstep_returns(rewards: &[f32], n: usize, gamma: f64) -> Vec<f32> {
    if rewards.len() < n {
        return Vec::new();
    }
    (0..=rewards.len() - n)
        .map(|t| {
            let mut acc = 0.0f64;
            let mut g = 1.0f64;
            for &r in &rewards[t..t + n] {
                acc += g * r as f64;
                g *= gamma;
            }
            acc as f32
        })
        .collect()
}

/// A replay buffer shared between one writer and any number of readers.
///
/// Steps of the episode in progress are staged outside the lock; a reader
/// only ever sees whole committed episodes.
#[derive(Debug, Clone)]
pub struct SharedReplay {
    inner: Arc<RwLock<ReplayBuffer>>,
}

impl SharedReplay {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self {
            inner: Arc::new(RwLock::new(buffer)),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ReplayBuffer> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, ReplayBuffer> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    /// Commits an episode built outside the lock.
    pub fn commit(&self, episode: Episode) -> Result<()> {
        self.write().insert_episode(episode)
    }
}

//! The actor-critic learner.
//!
//! One convolutional encoder feeds a deterministic actor and two critics.
//! Critic updates train the encoder; actor updates see its output as a
//! constant. Both critics have slowly tracking target copies; the encoder
//! has none.

mod schedule;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use schedule::{NoiseSchedule, Tier};

use crate::augment::random_shift;
use crate::error::{Error, Result};
use crate::frame::StackedObservation;
use crate::nn::checkpoint::{self, CheckpointHeader};
use crate::nn::{soft_update, Actor, AdamConfig, Critic, Encoder, Module, NetworkSpec, Parameter, Tape};
use crate::replay::{NStepBatch, ReplayBuffer};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub nstep: usize,
    /// Bound on the target-policy and actor-loss noise.
    pub noise_clip: f64,
    /// Environment steps between update pairs.
    pub update_every: u64,
    /// Environment steps before the first update.
    pub seed_frames: u64,
    /// Actor steps taken with uniform random actions.
    pub exploration_steps: u64,
    pub schedule: NoiseSchedule,
    pub features_dim: usize,
    pub hidden_dim: usize,
    /// Random-shift padding in pixels; 0 disables augmentation.
    pub pad: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-4,
            gamma: 0.99,
            tau: 0.01,
            nstep: 3,
            noise_clip: 0.3,
            update_every: 2,
            seed_frames: 4000,
            exploration_steps: 2000,
            schedule: NoiseSchedule::default(),
            features_dim: 50,
            hidden_dim: 1024,
            pad: 4,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("nstep", self.nstep as f64),
            ("noise_clip", self.noise_clip),
            ("update_every", self.update_every as f64),
            ("features_dim", self.features_dim as f64),
            ("hidden_dim", self.hidden_dim as f64),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!("tau {} outside (0, 1]", self.tau)));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Policy output plus unclipped Gaussian noise.
    Train,
    /// Policy output only.
    Eval,
    /// Uniform over `[−1, 1]^A`.
    Seed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    pub loss1: f64,
    pub loss2: f64,
    pub q1_mean: f64,
    pub q2_mean: f64,
    pub target_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub env_frame: u64,
    pub sigma: f64,
    pub critic: CriticStats,
    pub actor: ActorStats,
}

/// Emitted to the diagnostics hook as updates happen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateEvent {
    /// Clipped noise was drawn for a target or actor-loss action.
    Noise { draws: usize, max_abs: f64, clip: f64 },
    Critic(CriticStats),
    Actor(ActorStats),
}

pub type Hook = Box<dyn FnMut(&UpdateEvent) + Send>;

/// Snapshot of the acting path, safe to share across threads.
#[derive(Debug, Clone)]
pub struct Policy<S: Scalar> {
    pub encoder: Encoder<S>,
    pub actor: Actor<S>,
}

impl<S: Scalar> Policy<S> {
    /// Deterministic actions for a `[B,C,H,W]` batch.
    pub fn mean_action(&self, obs: &Tensor<S>) -> Result<Tensor<S>> {
        policy_mean(&self.encoder, &self.actor, obs)
    }

    pub fn act(&self, obs: &StackedObservation) -> Result<Vec<f32>> {
        let mu = self.mean_action(&obs.to_tensor())?;
        Ok(mu.values().iter().map(|v| v.to_f64() as f32).collect())
    }
}

fn policy_mean<S: Scalar>(encoder: &Encoder<S>, actor: &Actor<S>, obs: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let be = encoder.bind(&mut tape, false);
    let h = encoder.forward(&mut tape, &be, obs)?;
    let ba = actor.bind(&mut tape, false);
    let mu = actor.forward(&mut tape, &ba, h)?;
    Ok(tape.value(mu).clone())
}

/// Generator position, enough to continue a random stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::config(format!("invalid generator state: {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed is not hex"))?
            .try_into()
            .map_err(|_| bad("seed is not 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

pub struct Agent<S: Scalar> {
    pub config: AgentConfig,
    pub spec: NetworkSpec,
    pub encoder: Encoder<S>,
    pub actor: Actor<S>,
    pub critic1: Critic<S>,
    pub critic2: Critic<S>,
    pub critic1_target: Critic<S>,
    pub critic2_target: Critic<S>,
    pub encoder_opt: AdamConfig,
    pub actor_opt: AdamConfig,
    pub critic1_opt: AdamConfig,
    pub critic2_opt: AdamConfig,
    rng: ChaCha8Rng,
    /// Environment step up to which updates have been scheduled.
    frames_seen: u64,
    updates: u64,
    hook: Option<Hook>,
}

impl<S: Scalar> std::fmt::Debug for Agent<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("spec", &self.spec)
            .field("config", &self.config)
            .field("frames_seen", &self.frames_seen)
            .field("updates", &self.updates)
            .finish_non_exhaustive()
    }
}

impl<S: Scalar> Agent<S> {
    pub fn new(spec: NetworkSpec, config: AgentConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if spec.features_dim != config.features_dim || spec.hidden_dim != config.hidden_dim {
            return Err(Error::config(format!(
                "network widths ({}, {}) differ from agent config ({}, {})",
                spec.features_dim, spec.hidden_dim, config.features_dim, config.hidden_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&spec, &mut rng);
        let actor = Actor::new(&spec, &mut rng);
        let critic1 = Critic::new(&spec, &mut rng);
        let critic2 = Critic::new(&spec, &mut rng);
        let opt = AdamConfig::with_lr(config.lr);
        Ok(Self {
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            config,
            spec,
            encoder,
            actor,
            critic1,
            critic2,
            encoder_opt: opt,
            actor_opt: opt,
            critic1_opt: opt,
            critic2_opt: opt,
            rng,
            frames_seen: 0,
            updates: 0,
            hook: None,
        })
    }

    /// Installs a callback receiving every [`UpdateEvent`].
    pub fn set_hook(&mut self, hook: Hook) {
        self.hook = Some(hook);
    }

    pub fn clear_hook(&mut self) {
        self.hook = None;
    }

    fn emit(&mut self, event: UpdateEvent) {
        if let Some(h) = self.hook.as_mut() {
            h(&event);
        }
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Update pairs performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng_state(&mut self, state: &RngState) -> Result<()> {
        self.rng = state.restore()?;
        Ok(())
    }

    pub fn sigma(&self, t: u64) -> f64 {
        self.config.schedule.stddev(t)
    }

    pub fn policy(&self) -> Policy<S> {
        Policy {
            encoder: self.encoder.clone(),
            actor: self.actor.clone(),
        }
    }

    pub fn act(&mut self, obs: &StackedObservation, t: u64, mode: ActMode) -> Result<Vec<f32>> {
        let adim = self.spec.action_dim;
        if mode == ActMode::Seed {
            return Ok((0..adim).map(|_| self.rng.random_range(-1.0f32..=1.0)).collect());
        }
        let mu = policy_mean(&self.encoder, &self.actor, &obs.to_tensor())?;
        let mut action: Vec<f64> = mu.values().iter().map(|v| v.to_f64()).collect();
        if mode == ActMode::Train {
            let noise = self.gaussian(adim, self.sigma(t))?;
            action.iter_mut().zip(noise).for_each(|(a, e)| *a += e);
        }
        Ok(action.into_iter().map(|a| a.clamp(-1.0, 1.0) as f32).collect())
    }

    fn gaussian(&mut self, n: usize, sigma: f64) -> Result<Vec<f64>> {
        let dist = Normal::new(0.0, sigma)
            .map_err(|e| Error::config(format!("noise stddev {sigma}: {e}")))?;
        Ok((0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    /// `n` draws of `clip(N(0, σ²), −c, c)`.
    pub fn clipped_noise(&mut self, n: usize, sigma: f64) -> Result<Vec<f64>> {
        let c = self.config.noise_clip;
        let mut eps = self.gaussian(n, sigma)?;
        eps.iter_mut().for_each(|e| *e = e.clamp(-c, c));
        let max_abs = eps.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        self.emit(UpdateEvent::Noise {
            draws: n,
            max_abs,
            clip: c,
        });
        Ok(eps)
    }

    /// Random-shifts a batch of observations (identity when `pad` is 0).
    pub fn augment(&mut self, obs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.config.pad == 0 {
            return Ok(obs.clone());
        }
        random_shift(obs, self.config.pad, &mut self.rng)
    }

    /// Bootstrapped n-step targets for `batch`, whose `next_obs` is used as
    /// given. No gradient is recorded.
    pub fn td_target(&mut self, batch: &NStepBatch<S>, sigma: f64) -> Result<Vec<S>> {
        let (b, adim) = (batch.len(), self.spec.action_dim);
        let mut tape = Tape::new();
        let be = self.encoder.bind(&mut tape, false);
        let h = self.encoder.forward(&mut tape, &be, &batch.next_obs)?;
        let ba = self.actor.bind(&mut tape, false);
        let mu = self.actor.forward(&mut tape, &ba, h)?;
        let eps = self.clipped_noise(b * adim, sigma)?;
        let next_action = Tensor::from_fn(&[b, adim], |i| {
            S::from_f64((tape.value(mu).values()[i].to_f64() + eps[i]).clamp(-1.0, 1.0))
        });
        let a = tape.constant(next_action);
        let b1 = self.critic1_target.bind(&mut tape, false);
        let q1 = self.critic1_target.forward(&mut tape, &b1, h, a)?;
        let b2 = self.critic2_target.bind(&mut tape, false);
        let q2 = self.critic2_target.forward(&mut tape, &b2, h, a)?;
        let (q1, q2) = (tape.value(q1).values(), tape.value(q2).values());
        Ok((0..b)
            .map(|i| batch.reward[i] + batch.discount[i] * q1[i].min(q2[i]))
            .collect())
    }

    /// Regresses both critics onto `targets`, steps encoder and critics, then
    /// moves the target critics. `obs` is used as given.
    pub fn critic_step(&mut self, obs: &Tensor<S>, action: &Tensor<S>, targets: &[S]) -> Result<CriticStats> {
        let mut tape = Tape::new();
        let be = self.encoder.bind(&mut tape, true);
        let h = self.encoder.forward(&mut tape, &be, obs)?;
        let a = tape.constant(action.clone());
        let b1 = self.critic1.bind(&mut tape, true);
        let q1 = self.critic1.forward(&mut tape, &b1, h, a)?;
        let b2 = self.critic2.bind(&mut tape, true);
        let q2 = self.critic2.forward(&mut tape, &b2, h, a)?;
        let l1 = tape.mse(q1, targets)?;
        let l2 = tape.mse(q2, targets)?;
        let total = tape.add(l1, l2)?;
        let mean = |v: &[S]| v.iter().map(|x| x.to_f64()).sum::<f64>() / v.len() as f64;
        let stats = CriticStats {
            loss1: tape.item(l1).to_f64(),
            loss2: tape.item(l2).to_f64(),
            q1_mean: mean(tape.value(q1).values()),
            q2_mean: mean(tape.value(q2).values()),
            target_mean: mean(targets),
        };
        if !(stats.loss1.is_finite() && stats.loss2.is_finite()) {
            return Err(Error::NonFinite {
                what: "critic loss".into(),
                detail: format!("{stats:?} at update {}", self.updates),
            });
        }
        tape.backward(total)?;
        self.encoder.collect_grads(&tape, &be);
        self.critic1.collect_grads(&tape, &b1);
        self.critic2.collect_grads(&tape, &b2);
        self.encoder.adam_step(&self.encoder_opt)?;
        self.critic1.adam_step(&self.critic1_opt)?;
        self.critic2.adam_step(&self.critic2_opt)?;
        soft_update(&mut self.critic1_target, &self.critic1, self.config.tau)?;
        soft_update(&mut self.critic2_target, &self.critic2, self.config.tau)?;
        self.emit(UpdateEvent::Critic(stats));
        Ok(stats)
    }

    /// Augments `obs` and `next_obs` independently, builds targets and takes
    /// one critic step.
    pub fn update_critic(&mut self, batch: &NStepBatch<S>, sigma: f64) -> Result<CriticStats> {
        let obs = self.augment(&batch.obs)?;
        let next_obs = self.augment(&batch.next_obs)?;
        let shifted = NStepBatch {
            obs,
            action: batch.action.clone(),
            reward: batch.reward.clone(),
            discount: batch.discount.clone(),
            next_obs,
        };
        let y = self.td_target(&shifted, sigma)?;
        self.critic_step(&shifted.obs, &shifted.action, &y)
    }

    /// One actor step on `obs` as given; encoder and critics are read only.
    pub fn actor_step(&mut self, obs: &Tensor<S>, sigma: f64) -> Result<ActorStats> {
        let b = obs.shape()[0];
        let adim = self.spec.action_dim;
        let mut tape = Tape::new();
        let be = self.encoder.bind(&mut tape, false);
        let h = self.encoder.forward(&mut tape, &be, obs)?;
        let ba = self.actor.bind(&mut tape, true);
        let mu = self.actor.forward(&mut tape, &ba, h)?;
        let eps: Vec<S> = self.clipped_noise(b * adim, sigma)?.into_iter().map(S::from_f64).collect();
        let noisy = tape.add_const(mu, &eps)?;
        let a = tape.clamp(noisy, -S::one(), S::one());
        let b1 = self.critic1.bind(&mut tape, false);
        let q1 = self.critic1.forward(&mut tape, &b1, h, a)?;
        let b2 = self.critic2.bind(&mut tape, false);
        let q2 = self.critic2.forward(&mut tape, &b2, h, a)?;
        let q = tape.minimum(q1, q2)?;
        let mean_q = tape.mean(q);
        let loss = tape.scale(mean_q, -S::one());
        let stats = ActorStats {
            loss: tape.item(loss).to_f64(),
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite {
                what: "actor loss".into(),
                detail: format!("loss {} at update {}", stats.loss, self.updates),
            });
        }
        tape.backward(loss)?;
        self.actor.collect_grads(&tape, &ba);
        self.actor.adam_step(&self.actor_opt)?;
        self.emit(UpdateEvent::Actor(stats));
        Ok(stats)
    }

    pub fn update_actor(&mut self, batch: &NStepBatch<S>, sigma: f64) -> Result<ActorStats> {
        let obs = self.augment(&batch.obs)?;
        self.actor_step(&obs, sigma)
    }

    /// Environment steps in `(frames_seen, t]` at which an update pair is due.
    pub fn due_updates(&self, t: u64) -> impl Iterator<Item = u64> {
        let every = self.config.update_every;
        let first = (self.frames_seen / every + 1).max(self.config.seed_frames.div_ceil(every));
        (first..=t / every).map(move |k| k * every)
    }

    /// Advances the learner to environment step `t`: one critic update then
    /// one actor update, each on a fresh batch, for every multiple of
    /// `update_every` reached since the last call, from `seed_frames` on.
    pub fn train_step(&mut self, t: u64, buffer: &ReplayBuffer) -> Result<Option<UpdateStats>> {
        let due: Vec<u64> = self.due_updates(t).collect();
        self.frames_seen = self.frames_seen.max(t);
        let mut last = None;
        for frame in due {
            if !buffer.is_ready() {
                log::debug!("update at frame {frame} skipped: replay not ready");
                continue;
            }
            let sigma = self.sigma(frame);
            let batch = buffer.sample::<S, _>(self.config.batch_size, &mut self.rng)?;
            let critic = self.update_critic(&batch, sigma)?;
            let batch = buffer.sample::<S, _>(self.config.batch_size, &mut self.rng)?;
            let actor = self.update_actor(&batch, sigma)?;
            self.updates += 1;
            last = Some(UpdateStats {
                env_frame: frame,
                sigma,
                critic,
                actor,
            });
        }
        Ok(last)
    }

    fn modules(&self) -> [(&'static str, &dyn Module<S>); 6] {
        [
            ("encoder", &self.encoder),
            ("actor", &self.actor),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
        ]
    }

    /// Every parameter, prefixed by its network's name.
    pub fn named_params(&self) -> Vec<(String, &Parameter<S>)> {
        self.modules()
            .into_iter()
            .flat_map(|(prefix, m)| {
                m.params()
                    .into_iter()
                    .map(move |(name, p)| (format!("{prefix}.{name}"), p))
            })
            .collect()
    }

    fn params_mut_all(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.actor.params_mut());
        out.extend(self.critic1.params_mut());
        out.extend(self.critic2.params_mut());
        out.extend(self.critic1_target.params_mut());
        out.extend(self.critic2_target.params_mut());
        out
    }

    /// SHA-256 over the raw parameter values of the named networks.
    pub fn weights_digest(&self, prefixes: &[&str]) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (prefix, m) in self.modules() {
            if !prefixes.contains(&prefix) {
                continue;
            }
            for (_, p) in m.params() {
                buf.clear();
                p.values().iter().for_each(|v| v.write_le(&mut buf));
                hasher.update(&buf);
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            spec: self.spec,
            env_step: self.frames_seen,
        };
        checkpoint::save(path, &header, &self.named_params())
    }

    /// Replaces all weights and optimizer state with a checkpoint's.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let (header, loaded) = checkpoint::load::<S>(path)?;
        if header.spec != self.spec {
            return Err(Error::format(
                path,
                format!("network {:?} does not match agent {:?}", header.spec, self.spec),
            ));
        }
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec()))
            .collect();
        if expected.len() != loaded.len() {
            return Err(Error::format(
                path,
                format!("{} tensors stored, agent has {}", loaded.len(), expected.len()),
            ));
        }
        for ((name, shape), (stored, p)) in expected.iter().zip(&loaded) {
            if name != stored || shape.as_slice() != p.shape() {
                return Err(Error::format(
                    path,
                    format!("expected {name} {shape:?}, found {stored} {:?}", p.shape()),
                ));
            }
        }
        for (dst, (_, src)) in self.params_mut_all().into_iter().zip(loaded) {
            *dst = src;
        }
        self.frames_seen = header.env_step;
        Ok(())
    }

    /// Restores the update scheduling position (after loading weights).
    pub fn set_frames_seen(&mut self, t: u64) {
        self.frames_seen = t;
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }
}

#[cfg(test)]
mod tests;

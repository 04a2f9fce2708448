//! Run configuration: a TOML document plus `DRQ_` environment overrides.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Nested sections may be written as tables or as dotted keys
//! (`agent.batch_size = 64`).
//!
//! An environment variable `DRQ_<PATH>` overrides the key at `<PATH>`, where
//! path segments are separated by a double underscore and matched
//! case-insensitively: `DRQ_AGENT__BATCH_SIZE=64` sets `agent.batch_size`,
//! `DRQ_ENV__PENDULUM__DAMPING=0` sets `env.pendulum.damping`. Values are
//! parsed as TOML literals (`[1, 2]`, `true`, `0.5`), falling back to a plain
//! string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, NoiseSchedule, Tier};
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::replay::BufferConfig;

pub const ENV_PREFIX: &str = "DRQ_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    /// Replay capacity in transitions.
    pub buffer_capacity: usize,
    pub total_env_frames: u64,
    pub eval_every_frames: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Single-threaded evaluation and no wall-clock-dependent behavior.
    pub reproducible: bool,
    /// Checkpoint at the first episode end after every multiple of this many
    /// frames; 0 keeps only the final checkpoint.
    pub checkpoint_every_frames: u64,
    /// Write every finished episode to disk so a run can resume.
    pub persist_replay: bool,
}

impl Default for RunConfig {
    /// Desk-scale defaults: 100k frames with 500-step episodes.
    fn default() -> Self {
        Self {
            env: EnvConfig {
                episode_steps: 500,
                ..Default::default()
            },
            agent: AgentConfig {
                schedule: NoiseSchedule::for_tier(Tier::Easy),
                ..Default::default()
            },
            buffer_capacity: 1_000_000,
            total_env_frames: 100_000,
            eval_every_frames: 20_000,
            eval_episodes: 10,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs"),
            reproducible: false,
            checkpoint_every_frames: 20_000,
            persist_replay: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.buffer_config().validate()?;
        self.network_spec().validate()?;
        let repeat = self.env.action_repeat as u64;
        if self.eval_every_frames == 0 || self.eval_every_frames % repeat != 0 {
            return Err(Error::config(format!(
                "eval_every_frames {} must be a positive multiple of action_repeat {repeat}",
                self.eval_every_frames
            )));
        }
        if self.total_env_frames < self.agent.seed_frames {
            return Err(Error::config(format!(
                "total_env_frames {} is below seed_frames {}",
                self.total_env_frames, self.agent.seed_frames
            )));
        }
        if self.total_env_frames % repeat != 0 {
            return Err(Error::config(format!(
                "total_env_frames {} must be a multiple of action_repeat {repeat}",
                self.total_env_frames
            )));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.buffer_capacity < self.env.actor_steps() {
            return Err(Error::config(format!(
                "buffer_capacity {} cannot hold one episode of {} steps",
                self.buffer_capacity,
                self.env.actor_steps()
            )));
        }
        Ok(())
    }

    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            capacity: self.buffer_capacity,
            nstep: self.agent.nstep,
            gamma: self.agent.gamma,
            frame_stack: self.env.frame_stack,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let [channels, size, _] = self.env.observation_shape();
        NetworkSpec {
            obs_channels: channels,
            obs_size: size,
            action_dim: self.env.action_dim(),
            features_dim: self.agent.features_dim,
            hidden_dim: self.agent.hidden_dim,
        }
    }

    /// Parses a TOML document over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Loads an optional file, then applies `DRQ_` overrides from `vars`.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("reading {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in vars {
            if let Some(path) = key.strip_prefix(ENV_PREFIX) {
                apply_override(&mut table, path, &value)?;
            }
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let segments: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if segments.iter().any(String::is_empty) {
        return Err(Error::config(format!("malformed override {ENV_PREFIX}{path}")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let (last, parents) = segments.split_last().expect("non-empty");
    let mut node = table;
    for seg in parents {
        let entry = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {ENV_PREFIX}{path}: '{seg}' is not a section")))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

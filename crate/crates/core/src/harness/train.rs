//! The interaction and learning loop for one seed.
//!
//! A run directory holds:
//!
//! * `metrics.csv`: one evaluation row per `eval_every_frames` frames
//! * `train_episodes.csv`: the return of every training episode
//! * `run.json`: resolved config, its hash and a hardware fingerprint
//! * `final.ckpt`: weights and optimizer state at the end of the run
//! * `checkpoint.ckpt` + `resume.json` + `replay/`: enough to resume
//!
//! Resuming restarts from the last checkpoint, which is always taken at an
//! episode boundary. Logs are cut back to that point, the persisted episodes
//! are replayed into a fresh buffer, and the agent's generator, update count
//! and schedule position are restored, so the continued run produces the same
//! rows an uninterrupted run would.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Agent, RngState, UpdateStats};
use crate::envs::make_env;
use crate::error::{Error, Result};
use crate::replay::{read_episode, write_episode, ReplayBuffer};

use super::config::RunConfig;
use super::eval::{derive_seed, evaluate_on};
use super::hardware::Fingerprint;
use super::metrics::{truncate_after, CsvLog, MetricRow, TrainEpisodeRow, METRICS_FILE, TRAIN_EPISODES_FILE};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RESUME_CHECKPOINT: &str = "checkpoint.ckpt";
pub const RESUME_STATE: &str = "resume.json";
pub const SIDECAR: &str = "run.json";
pub const REPLAY_DIR: &str = "replay";
pub const DIAGNOSTIC_DIR: &str = "diagnostic";

/// Seed streams derived from a run seed.
const AGENT_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 4;
const EPISODE_STREAM: u64 = 3;

/// Loop position at an episode boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub seed: u64,
    pub config_hash: String,
    pub env_frame: u64,
    pub actor_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub agent_frames_seen: u64,
    pub rng: RngState,
    pub last_update: Option<UpdateStats>,
    pub next_eval: u64,
    pub next_checkpoint: u64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Sidecar<'a> {
    seed: u64,
    config_hash: String,
    hardware: Fingerprint,
    config: &'a RunConfig,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `resume.json` when the run directory has one.
    pub resume: bool,
    /// Stop at the first episode boundary at or after this frame, leaving a
    /// resumable checkpoint. The run is not finished afterwards.
    pub stop_after_frame: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub env_frames: u64,
    pub actor_steps: u64,
    pub updates: u64,
    pub episodes: u64,
    /// Rows written during this invocation.
    pub rows: Vec<MetricRow>,
    /// False when stopped early by `stop_after_frame`.
    pub finished: bool,
    /// Wall time of this invocation, setup included.
    pub elapsed_s: f64,
}

/// Directory for one seed's outputs.
pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value).expect("serializable"))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn check_finite(row: &MetricRow) -> Result<()> {
    let fields = [
        ("episode_return", Some(row.episode_return)),
        ("critic_loss", row.critic_loss),
        ("actor_loss", row.actor_loss),
        ("sigma", Some(row.sigma)),
    ];
    match fields.iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
        Some((name, v)) => Err(Error::NonFinite {
            what: (*name).to_string(),
            detail: format!("{v:?} at env frame {}", row.env_frame),
        }),
        None => Ok(()),
    }
}

struct Diagnostic<'a> {
    dir: &'a Path,
    error: &'a Error,
    env_frame: u64,
    last_update: Option<UpdateStats>,
}

impl Diagnostic<'_> {
    fn save(&self, agent: &Agent<f32>) {
        let dir = self.dir.join(DIAGNOSTIC_DIR);
        let result = std::fs::create_dir_all(&dir)
            .map_err(Error::from)
            .and_then(|_| agent.save_checkpoint(&dir.join("agent.ckpt")))
            .and_then(|_| {
                write_json_atomic(
                    &dir.join("state.json"),
                    &serde_json::json!({
                        "error": self.error.to_string(),
                        "env_frame": self.env_frame,
                        "updates": agent.updates(),
                        "last_update": self.last_update,
                    }),
                )
            });
        match result {
            Ok(()) => log::error!("diagnostic state written to {}", dir.display()),
            Err(e) => log::error!("could not write diagnostic state: {e}"),
        }
    }
}

/// Trains one seed. Outputs go to `seed_dir(config.out_dir, seed)`.
pub fn run_training(config: &RunConfig, seed: u64, options: &TrainOptions) -> Result<TrainOutcome> {
    let invoked = Instant::now();
    config.validate()?;
    let dir = seed_dir(&config.out_dir, seed);
    let replay_dir = dir.join(REPLAY_DIR);
    std::fs::create_dir_all(&dir)?;
    if config.persist_replay {
        std::fs::create_dir_all(&replay_dir)?;
    }
    let hash = config.hash();

    let mut agent = Agent::<f32>::new(config.network_spec(), config.agent, derive_seed(seed, AGENT_STREAM, 0))?;
    let mut buffer = ReplayBuffer::new(config.buffer_config())?;
    let repeat = config.env.action_repeat as u64;
    let every = config.eval_every_frames;
    let ckpt_every = config.checkpoint_every_frames;

    let state_path = dir.join(RESUME_STATE);
    let mut state = ResumeState {
        seed,
        config_hash: hash.clone(),
        env_frame: 0,
        actor_steps: 0,
        episodes: 0,
        updates: 0,
        agent_frames_seen: 0,
        rng: agent.rng_state(),
        last_update: None,
        next_eval: every,
        next_checkpoint: if ckpt_every == 0 { u64::MAX } else { ckpt_every },
        wall_clock_s: 0.0,
    };

    if options.resume && state_path.exists() {
        let text = std::fs::read_to_string(&state_path)?;
        state = serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e.to_string()))?;
        if state.config_hash != hash || state.seed != seed {
            return Err(Error::config(format!(
                "{} was written by a different config or seed",
                state_path.display()
            )));
        }
        agent.load_checkpoint(&dir.join(RESUME_CHECKPOINT))?;
        agent.set_rng_state(&state.rng)?;
        agent.set_frames_seen(state.agent_frames_seen);
        agent.set_updates(state.updates);
        for e in 0..state.episodes {
            let path = replay_dir.join(episode_file_name(e));
            buffer.insert_episode(read_episode(&path)?)?;
        }
        truncate_after(&dir.join(METRICS_FILE), state.env_frame)?;
        truncate_after(&dir.join(TRAIN_EPISODES_FILE), state.env_frame)?;
        log::info!(
            "resuming seed {seed} at frame {} ({} episodes, {} updates)",
            state.env_frame,
            state.episodes,
            state.updates
        );
    } else {
        for name in [METRICS_FILE, TRAIN_EPISODES_FILE, RESUME_STATE, RESUME_CHECKPOINT, FINAL_CHECKPOINT] {
            let p = dir.join(name);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }

    write_json_atomic(
        &dir.join(SIDECAR),
        &Sidecar {
            seed,
            config_hash: hash.clone(),
            hardware: Fingerprint::detect(),
            config,
        },
    )?;

    let mut metrics = CsvLog::append(&dir.join(METRICS_FILE))?;
    let mut episodes_log = CsvLog::append(&dir.join(TRAIN_EPISODES_FILE))?;
    let mut env = make_env(&config.env)?;
    let eval_threads = if config.reproducible {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };

    let started = Instant::now();
    let start_frame = state.env_frame;
    let clock_offset = state.wall_clock_s;
    let env_frames_before = state.env_frame;
    let mut rows = Vec::new();
    let mut t = state.env_frame;
    let mut actor_steps = state.actor_steps;
    let mut episode = state.episodes;
    let mut last_update = state.last_update;
    let mut next_eval = state.next_eval;
    let mut next_checkpoint = state.next_checkpoint;

    let mut obs = env.reset(derive_seed(seed, EPISODE_STREAM, episode));
    buffer.start_episode(env.frame().expect("frame after reset"), env.action_dim());
    let mut episode_return = 0.0f64;

    let fail = |agent: &Agent<f32>, error: Error, t: u64, last: Option<UpdateStats>| -> Error {
        if matches!(error, Error::NonFinite { .. }) {
            Diagnostic {
                dir: &dir,
                error: &error,
                env_frame: t,
                last_update: last,
            }
            .save(agent);
        }
        error
    };

    while t < config.total_env_frames {
        let mode = if actor_steps < config.agent.exploration_steps {
            ActMode::Seed
        } else {
            ActMode::Train
        };
        let action = agent.act(&obs, t, mode)?;
        let step = env.step(&action)?;
        let acted_at = t;
        t += repeat;
        actor_steps += 1;
        episode_return += step.reward as f64;
        buffer.add_step(env.frame().expect("frame after step"), &action, step.reward)?;
        obs = step.obs;

        match agent.train_step(acted_at, &buffer) {
            Ok(Some(stats)) => last_update = Some(stats),
            Ok(None) => {}
            Err(e) => return Err(fail(&agent, e, t, last_update)),
        }

        if t >= next_eval {
            next_eval += every;
            let result = evaluate_on(
                &agent.policy(),
                &config.env,
                config.eval_episodes,
                derive_seed(seed, EVAL_STREAM, t),
                eval_threads,
            )?;
            let elapsed = started.elapsed().as_secs_f64();
            let row = MetricRow {
                env_frame: t,
                wall_clock_s: clock_offset + elapsed,
                episode_return: result.mean,
                fps: (t - start_frame) as f64 / elapsed.max(1e-9),
                critic_loss: last_update.map(|s| 0.5 * (s.critic.loss1 + s.critic.loss2)),
                actor_loss: last_update.map(|s| s.actor.loss),
                sigma: agent.sigma(t),
            };
            if let Err(e) = check_finite(&row) {
                metrics.write(&row)?;
                return Err(fail(&agent, e, t, last_update));
            }
            metrics.write(&row)?;
            log::info!(
                "seed {seed} frame {t}: eval return {:.2}, {:.0} fps",
                row.episode_return,
                row.fps
            );
            rows.push(row);
        }

        if step.step_budget_exhausted {
            if config.persist_replay {
                let open = buffer.open_episode().expect("an episode is open");
                write_episode(&replay_dir.join(episode_file_name(episode)), open)?;
            }
            buffer.end_episode()?;
            episodes_log.write(&TrainEpisodeRow {
                env_frame: t,
                episode,
                episode_return,
            })?;
            episode += 1;
            episode_return = 0.0;

            let stopping = options.stop_after_frame.is_some_and(|f| t >= f) && t < config.total_env_frames;
            if config.persist_replay && (t >= next_checkpoint || stopping) {
                while next_checkpoint <= t {
                    next_checkpoint = next_checkpoint.saturating_add(ckpt_every.max(1));
                }
                agent.save_checkpoint(&dir.join(RESUME_CHECKPOINT))?;
                write_json_atomic(
                    &state_path,
                    &ResumeState {
                        seed,
                        config_hash: hash.clone(),
                        env_frame: t,
                        actor_steps,
                        episodes: episode,
                        updates: agent.updates(),
                        agent_frames_seen: agent.frames_seen(),
                        rng: agent.rng_state(),
                        last_update,
                        next_eval,
                        next_checkpoint,
                        wall_clock_s: clock_offset + started.elapsed().as_secs_f64(),
                    },
                )?;
            }
            if stopping {
                return Ok(TrainOutcome {
                    dir,
                    env_frames: t,
                    actor_steps,
                    updates: agent.updates(),
                    episodes: episode,
                    rows,
                    finished: false,
                    elapsed_s: invoked.elapsed().as_secs_f64(),
                });
            }
            if t < config.total_env_frames {
                obs = env.reset(derive_seed(seed, EPISODE_STREAM, episode));
                buffer.start_episode(env.frame().expect("frame after reset"), env.action_dim());
            }
        }
    }

    let counted = env_frames_before + env.total_frames();
    if counted != t {
        return Err(Error::contract(format!(
            "frame accounting: loop counted {t}, environment counted {counted}"
        )));
    }
    agent.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        dir,
        env_frames: t,
        actor_steps,
        updates: agent.updates(),
        episodes: episode,
        rows,
        finished: true,
        elapsed_s: invoked.elapsed().as_secs_f64(),
    })
}

pub fn episode_file_name(index: u64) -> String {
    format!("episode_{index:06}.bin")
}

/// Trains every seed in `config.seeds`, one after another.
pub fn run_all_seeds(config: &RunConfig, options: &TrainOptions) -> Result<Vec<TrainOutcome>> {
    config.seeds.iter().map(|&s| run_training(config, s, options)).collect()
}

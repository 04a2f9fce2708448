//! Throughput measurements with a machine-readable report.
//!
//! Absolute rates are only meaningful next to the hardware fingerprint the
//! report carries; comparisons should use ratios taken on one machine.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_shifts, shift_batch, shift_reference};
use crate::error::{Error, Result};
use crate::frame::{Frame, FRAME_CHANNELS};
use crate::replay::{BufferConfig, Episode, ReplayBuffer};
use crate::tensor::Tensor;

use super::config::RunConfig;
use super::hardware::Fingerprint;
use super::train::{run_training, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Augmentation batch `[B, C, S, S]`.
    pub augment_batch: [usize; 4],
    pub augment_pad: usize,
    pub augment_repeats: usize,
    pub replay_frame_size: usize,
    pub replay_episode_steps: usize,
    pub replay_episodes: usize,
    pub replay_batch: usize,
    pub replay_nstep: usize,
    pub replay_samples: usize,
    /// Configuration of the end-to-end measurement; `None` skips it.
    pub end_to_end: Option<RunConfig>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            augment_batch: [256, 9, 84, 84],
            augment_pad: 4,
            augment_repeats: 3,
            replay_frame_size: 84,
            replay_episode_steps: 500,
            replay_episodes: 20,
            replay_batch: 256,
            replay_nstep: 3,
            replay_samples: 20,
            end_to_end: Some(default_end_to_end()),
            seed: 0,
        }
    }
}

/// A short run at the default network size: seed frames plus a few hundred
/// updates.
pub fn default_end_to_end() -> RunConfig {
    let mut c = RunConfig::default();
    c.agent.seed_frames = 1000;
    c.agent.exploration_steps = 500;
    c.total_env_frames = 1400;
    c.eval_every_frames = 1400;
    c.eval_episodes = 1;
    c.env.episode_steps = 200;
    c.checkpoint_every_frames = 0;
    c.persist_replay = false;
    c.seeds = vec![0];
    c.reproducible = true;
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub batch: [usize; 4],
    pub pad: usize,
    pub repeats: usize,
    pub reference_images_per_s: f64,
    pub optimized_images_per_s: f64,
    pub speedup: f64,
    /// Largest per-pixel difference between the two paths.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub frame_size: usize,
    pub stored_transitions: usize,
    pub batch: usize,
    pub nstep: usize,
    pub add_transitions_per_s: f64,
    pub sample_transitions_per_s: f64,
    pub mean_sample_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub env_frames: u64,
    pub updates: u64,
    /// Frames over the run's own elapsed-time meter.
    pub fps: f64,
    pub elapsed_s: f64,
    /// Frames over a stopwatch held around the whole call.
    pub stopwatch_fps: f64,
    pub stopwatch_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub hardware: Fingerprint,
    pub augment: AugmentReport,
    pub replay: ReplayReport,
    pub end_to_end: Option<EndToEndReport>,
}

impl ThroughputReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn benchmark_augment(cfg: &BenchConfig) -> Result<AugmentReport> {
    let [b, c, h, w] = cfg.augment_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values: Vec<f32> = (0..b * c * h * w).map(|_| rng.random::<f32>()).collect();
    let batch = Tensor::new(vec![b, c, h, w], values)?;
    let repeats = cfg.augment_repeats.max(1);
    let shifts: Vec<_> = (0..repeats).map(|_| draw_shifts(&mut rng, b, cfg.augment_pad)).collect();

    let mut max_abs_diff = 0.0f64;
    let mut reference_s = 0.0;
    let mut optimized_s = 0.0;
    for s in &shifts {
        let t0 = Instant::now();
        let r = shift_reference(&batch, cfg.augment_pad, s)?;
        reference_s += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let o = shift_batch(&batch, cfg.augment_pad, s)?;
        optimized_s += t0.elapsed().as_secs_f64();
        let d = r
            .values()
            .iter()
            .zip(o.values())
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max);
        max_abs_diff = max_abs_diff.max(d);
    }
    let images = (b * repeats) as f64;
    Ok(AugmentReport {
        batch: cfg.augment_batch,
        pad: cfg.augment_pad,
        repeats,
        reference_images_per_s: images / reference_s,
        optimized_images_per_s: images / optimized_s,
        speedup: reference_s / optimized_s,
        max_abs_diff,
    })
}

pub fn benchmark_replay(cfg: &BenchConfig) -> Result<ReplayReport> {
    let size = cfg.replay_frame_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames: Vec<Frame> = (0..8)
        .map(|_| {
            let bytes = (0..size * size * FRAME_CHANNELS).map(|_| rng.random::<u8>()).collect();
            Frame::new(size, bytes).expect("frame size")
        })
        .collect();
    let mut buffer = ReplayBuffer::new(BufferConfig {
        capacity: cfg.replay_episodes * cfg.replay_episode_steps,
        nstep: cfg.replay_nstep,
        ..Default::default()
    })?;
    let t0 = Instant::now();
    for e in 0..cfg.replay_episodes {
        let mut ep = Episode::new(&frames[e % frames.len()], 1);
        for t in 0..cfg.replay_episode_steps {
            ep.push(&frames[t % frames.len()], &[0.5], rng.random::<f32>())?;
        }
        buffer.insert_episode(ep)?;
    }
    let add_s = t0.elapsed().as_secs_f64();
    let samples = cfg.replay_samples.max(1);
    let t0 = Instant::now();
    for _ in 0..samples {
        let batch = buffer.sample::<f32, _>(cfg.replay_batch, &mut rng)?;
        if batch.len() != cfg.replay_batch {
            return Err(Error::contract("sample returned a short batch"));
        }
    }
    let sample_s = t0.elapsed().as_secs_f64();
    let stored = buffer.stored_steps();
    Ok(ReplayReport {
        frame_size: size,
        stored_transitions: stored,
        batch: cfg.replay_batch,
        nstep: cfg.replay_nstep,
        add_transitions_per_s: stored as f64 / add_s,
        sample_transitions_per_s: (samples * cfg.replay_batch) as f64 / sample_s,
        mean_sample_ms: 1e3 * sample_s / samples as f64,
    })
}

/// Times a short training run in a scratch directory.
pub fn benchmark_end_to_end(run: &RunConfig) -> Result<EndToEndReport> {
    static RUNS: AtomicU64 = AtomicU64::new(0);
    let scratch = std::env::temp_dir().join(format!(
        "drqv2-bench-{}-{}",
        std::process::id(),
        RUNS.fetch_add(1, Ordering::Relaxed)
    ));
    let mut run = run.clone();
    run.out_dir = scratch.clone();
    let seed = run.seeds.first().copied().unwrap_or(0);
    let stopwatch = Instant::now();
    let outcome = run_training(&run, seed, &TrainOptions::default());
    let stopwatch_s = stopwatch.elapsed().as_secs_f64();
    let _ = std::fs::remove_dir_all(&scratch);
    let outcome = outcome?;
    Ok(EndToEndReport {
        env_frames: outcome.env_frames,
        updates: outcome.updates,
        fps: outcome.env_frames as f64 / outcome.elapsed_s,
        elapsed_s: outcome.elapsed_s,
        stopwatch_fps: outcome.env_frames as f64 / stopwatch_s,
        stopwatch_s,
    })
}

pub fn benchmark_throughput(cfg: &BenchConfig) -> Result<ThroughputReport> {
    let augment = benchmark_augment(cfg)?;
    log::info!("augmentation speedup {:.2}x", augment.speedup);
    let replay = benchmark_replay(cfg)?;
    log::info!("replay sampling {:.0} transitions/s", replay.sample_transitions_per_s);
    let end_to_end = cfg.end_to_end.as_ref().map(benchmark_end_to_end).transpose()?;
    Ok(ThroughputReport {
        hardware: Fingerprint::detect(),
        augment,
        replay,
        end_to_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        let mut e2e = default_end_to_end();
        e2e.env.render_size = 16;
        e2e.agent.hidden_dim = 16;
        e2e.agent.features_dim = 8;
        e2e.agent.batch_size = 8;
        e2e.agent.seed_frames = 100;
        e2e.agent.exploration_steps = 10;
        e2e.total_env_frames = 200;
        e2e.eval_every_frames = 200;
        e2e.env.episode_steps = 100;
        BenchConfig {
            augment_batch: [8, 9, 20, 20],
            augment_repeats: 2,
            replay_frame_size: 16,
            replay_episode_steps: 50,
            replay_episodes: 4,
            replay_batch: 32,
            replay_samples: 3,
            end_to_end: Some(e2e),
            ..Default::default()
        }
    }

    #[test]
    fn report_is_complete_and_consistent() {
        let r = benchmark_throughput(&small()).unwrap();
        assert!(r.augment.max_abs_diff <= 1e-6);
        assert!(r.augment.speedup > 0.0);
        assert_eq!(r.replay.stored_transitions, 200);
        assert!(r.replay.sample_transitions_per_s > 0.0);
        let e = r.end_to_end.as_ref().unwrap();
        assert_eq!(e.env_frames, 200);
        assert!(e.elapsed_s <= e.stopwatch_s);
        let back: ThroughputReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn default_end_to_end_is_valid() {
        default_end_to_end().validate().unwrap();
    }
}

//! Training orchestration, evaluation, metrics, benchmarks, ablations and
//! plots.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod eval;
pub mod hardware;
pub mod metrics;
pub mod plot;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationReport};
pub use bench::{benchmark_throughput, BenchConfig, ThroughputReport};
pub use config::RunConfig;
pub use eval::{evaluate, evaluate_on, random_baseline, ActionSource, EvalResult};
pub use hardware::Fingerprint;
pub use metrics::{MetricRow, TrainEpisodeRow};
pub use plot::{plot, CurveSource};
pub use train::{run_all_seeds, run_training, seed_dir, TrainOptions, TrainOutcome};

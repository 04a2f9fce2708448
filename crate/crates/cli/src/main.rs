//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure,
//! 4 non-finite numerics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drqv2::agent::Agent;
use drqv2::envs::TaskId;
use drqv2::harness::eval::{evaluate_on, random_baseline};
use drqv2::harness::plot::CurveSource;
use drqv2::harness::{
    benchmark_throughput, plot, run_ablation, run_all_seeds, AblationAxis, BenchConfig, RunConfig, TrainOptions,
};
use drqv2::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "drqv2", version, about = "Pixel-based continuous control with a data-regularized actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the last checkpoint in each seed directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint, or the uniform-random policy.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; omit with --random.
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Evaluate uniformly random actions instead.
        #[arg(long, conflicts_with = "checkpoint")]
        random: bool,
        /// Episodes (defaults to the config's eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Measure augmentation, replay and end-to-end throughput.
    Bench {
        /// TOML file of benchmark settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the end-to-end training measurement.
        #[arg(long)]
        skip_end_to_end: bool,
    },
    /// Train one run per (value, seed) along one axis.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// nstep, buffer_capacity or noise_schedule.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,3,5 or fixed,schedule.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Render learning curves from run directories or metrics files.
    Plot {
        /// Run directories (holding seed_* subdirectories) or metrics CSVs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; DRQ_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<TaskId>,
    /// Total environment frames.
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded evaluation; metrics are reproducible bit for bit.
    #[arg(long)]
    reproducible: bool,
}

impl RunArgs {
    fn resolve(&self) -> drqv2::Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref(), std::env::vars())?;
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(t) = self.task {
            c.env.task = t;
        }
        if let Some(f) = self.frames {
            c.total_env_frames = f;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        c.reproducible |= self.reproducible;
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Runtime => 3,
        ErrorCategory::Numerics => 4,
    }
}

fn write_report(text: &str, out: Option<&Path>) -> drqv2::Result<()> {
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> drqv2::Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let outcomes = run_all_seeds(
                &cfg,
                &TrainOptions {
                    resume,
                    stop_after_frame: None,
                },
            )?;
            for o in outcomes {
                let last = o.rows.last().map_or(f64::NAN, |r| r.episode_return);
                println!(
                    "{}: {} frames, {} updates, last eval return {last:.2}",
                    o.dir.display(),
                    o.env_frames,
                    o.updates
                );
            }
        }
        Command::Eval {
            run,
            checkpoint,
            random,
            episodes,
        } => {
            let cfg = run.resolve()?;
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            let seed = cfg.seeds[0];
            let result = if random {
                random_baseline(&cfg.env, episodes, seed)?
            } else {
                let path = checkpoint.expect("clap requires a checkpoint without --random");
                let mut agent = Agent::<f32>::new(cfg.network_spec(), cfg.agent, seed)?;
                agent.load_checkpoint(&path)?;
                let threads = if cfg.reproducible {
                    1
                } else {
                    std::thread::available_parallelism().map_or(1, |n| n.get())
                };
                evaluate_on(&agent.policy(), &cfg.env, episodes, seed, threads)?
            };
            write_report(&serde_json::to_string_pretty(&result).expect("serializable"), None)?;
        }
        Command::Bench {
            config,
            out,
            skip_end_to_end,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    toml::from_str::<BenchConfig>(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
                }
                None => BenchConfig::default(),
            };
            if skip_end_to_end {
                cfg.end_to_end = None;
            }
            let report = benchmark_throughput(&cfg)?;
            write_report(&report.to_json(), out.as_deref())?;
        }
        Command::Ablate { run, axis, values } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = run.resolve()?;
            let report = run_ablation(&cfg, axis, &values)?;
            print!("{}", drqv2::harness::ablation::markdown_table(axis, &report.summary));
            println!("table: {}", report.table_csv.display());
        }
        Command::Plot { inputs, out } => {
            let mut curves = Vec::new();
            for input in &inputs {
                if input.is_dir() {
                    curves.push(CurveSource::from_run_dir(input)?);
                } else {
                    curves.push(CurveSource {
                        label: input.display().to_string(),
                        files: vec![input.clone()],
                    });
                }
            }
            for f in plot(&curves, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

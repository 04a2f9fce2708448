//! One-knob ablations over shared seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{NoiseSchedule, Tier};
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::metrics::{read_metrics, MetricRow, METRICS_FILE};
use super::plot::mean_ci95;
use super::train::{run_training, seed_dir, TrainOptions};

/// Stddev of the fixed-noise arm.
pub const FIXED_SIGMA: f64 = 0.2;
pub const NSTEP_VALUES: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Nstep,
    BufferCapacity,
    NoiseSchedule,
}

impl AblationAxis {
    /// Config paths (dotted, as in the TOML file) the axis may change.
    fn touched(self) -> &'static [&'static str] {
        match self {
            AblationAxis::Nstep => &["agent.nstep"],
            AblationAxis::BufferCapacity => &["buffer_capacity"],
            AblationAxis::NoiseSchedule => &["agent.schedule"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Nstep => "nstep",
            AblationAxis::BufferCapacity => "buffer_capacity",
            AblationAxis::NoiseSchedule => "noise_schedule",
        }
    }

    /// Applies one value to a copy of `base`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = |why: &str| Error::config(format!("ablation {}: value '{value}' {why}", self.name()));
        let mut c = base.clone();
        match self {
            AblationAxis::Nstep => {
                let n: usize = value.parse().map_err(|_| bad("is not an integer"))?;
                if !NSTEP_VALUES.contains(&n) {
                    return Err(bad("must be one of 1, 3, 5"));
                }
                c.agent.nstep = n;
            }
            AblationAxis::BufferCapacity => {
                let cap = parse_count(value).ok_or_else(|| bad("is not a transition count"))?;
                if cap == 0 {
                    return Err(bad("must be positive"));
                }
                c.buffer_capacity = cap;
            }
            AblationAxis::NoiseSchedule => {
                c.agent.schedule = match value {
                    "fixed" => NoiseSchedule::fixed(FIXED_SIGMA),
                    "schedule" => match base.agent.schedule {
                        s @ NoiseSchedule::Linear { .. } => s,
                        NoiseSchedule::Fixed { .. } => NoiseSchedule::for_tier(Tier::Easy),
                    },
                    _ => return Err(bad("must be 'fixed' or 'schedule'")),
                };
            }
        }
        c.validate().map_err(|e| bad(&format!("gives an invalid config: {e}")))?;
        Ok(c)
    }
}

/// Integers with optional `_` separators or `e` notation (`100_000`, `1e6`).
fn parse_count(s: &str) -> Option<usize> {
    let s = s.replace('_', "");
    if let Ok(n) = s.parse::<usize>() {
        return Some(n);
    }
    let f: f64 = s.parse().ok()?;
    (f.is_finite() && f >= 0.0 && f.fract() == 0.0 && f <= usize::MAX as f64).then_some(f as usize)
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nstep" | "n_step" => Ok(AblationAxis::Nstep),
            "buffer" | "buffer_capacity" => Ok(AblationAxis::BufferCapacity),
            "noise" | "noise_schedule" => Ok(AblationAxis::NoiseSchedule),
            _ => Err(Error::config(format!(
                "unknown ablation axis '{s}' (expected nstep, buffer_capacity or noise_schedule)"
            ))),
        }
    }
}

/// Flattened `path -> value` view of a config, for diffing.
fn leaves(config: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", &serde_json::to_value(config).expect("config serializes"), &mut out);
    out
}

/// Paths at which two configs differ.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let (la, lb) = (leaves(a), leaves(b));
    let mut keys: Vec<&String> = la.keys().chain(lb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| la.get(*k) != lb.get(*k))
        .cloned()
        .collect()
}

/// Errors unless `variant` differs from `base` only under the axis's paths
/// (and the output directory).
pub fn assert_single_knob(axis: AblationAxis, base: &RunConfig, variant: &RunConfig) -> Result<()> {
    let stray: Vec<String> = config_diff(base, variant)
        .into_iter()
        .filter(|k| k != "out_dir" && !axis.touched().iter().any(|t| k == t || k.starts_with(&format!("{t}."))))
        .collect();
    if stray.is_empty() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "ablation over {axis} also changes {}",
            stray.join(", ")
        )))
    }
}

/// Trapezoid area under the (frame, return) curve divided by the frame span,
/// i.e. the time-averaged return; a single row gives its own return.
pub fn normalized_auc(rows: &[MetricRow]) -> f64 {
    match rows {
        [] => 0.0,
        [only] => only.episode_return,
        _ => {
            let area: f64 = rows
                .windows(2)
                .map(|w| 0.5 * (w[0].episode_return + w[1].episode_return) * (w[1].env_frame - w[0].env_frame) as f64)
                .sum();
            let span = (rows[rows.len() - 1].env_frame - rows[0].env_frame) as f64;
            if span > 0.0 {
                area / span
            } else {
                rows.iter().map(|r| r.episode_return).sum::<f64>() / rows.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub value: String,
    pub seed: u64,
    pub metrics: PathBuf,
    pub auc: f64,
    pub final_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub value: String,
    pub seeds: usize,
    pub auc_mean: f64,
    pub auc_ci95: f64,
    pub final_mean: f64,
    pub final_ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
    pub table_csv: PathBuf,
    pub table_markdown: PathBuf,
}

impl AblationReport {
    pub fn summary_for(&self, value: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.value == value)
    }
}

/// Directory of one arm's runs.
pub fn arm_dir(out: &Path, axis: AblationAxis, value: &str) -> PathBuf {
    out.join(format!("{}={value}", axis.name()))
}

/// Validates every value, then trains one run per (value, seed) with the
/// base config's seeds and writes `ablation_<axis>.csv` / `.md` to the base
/// output directory.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<AblationReport> {
    base.validate()?;
    if values.is_empty() {
        return Err(Error::config(format!("ablation over {axis} needs at least one value")));
    }
    let mut arms = Vec::with_capacity(values.len());
    for v in values {
        let mut c = axis.apply(base, v)?;
        c.out_dir = arm_dir(&base.out_dir, axis, v);
        assert_single_knob(axis, base, &c)?;
        arms.push((v.clone(), c));
    }

    let mut runs = Vec::new();
    for (value, cfg) in &arms {
        for &seed in &base.seeds {
            log::info!("ablation {axis}={value}, seed {seed}");
            run_training(cfg, seed, &TrainOptions::default())?;
            let metrics = seed_dir(&cfg.out_dir, seed).join(METRICS_FILE);
            let rows = read_metrics(&metrics)?;
            runs.push(AblationRun {
                value: value.clone(),
                seed,
                auc: normalized_auc(&rows),
                final_return: rows.last().map_or(0.0, |r| r.episode_return),
                metrics,
            });
        }
    }

    let summary: Vec<AblationSummary> = values
        .iter()
        .map(|v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| &r.value == v).collect();
            let (auc_mean, auc_ci95) = mean_ci95(&mine.iter().map(|r| r.auc).collect::<Vec<_>>());
            let (final_mean, final_ci95) = mean_ci95(&mine.iter().map(|r| r.final_return).collect::<Vec<_>>());
            AblationSummary {
                value: v.clone(),
                seeds: mine.len(),
                auc_mean,
                auc_ci95,
                final_mean,
                final_ci95,
            }
        })
        .collect();

    std::fs::create_dir_all(&base.out_dir)?;
    let table_csv = base.out_dir.join(format!("ablation_{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&table_csv).map_err(|e| Error::format(&table_csv, e.to_string()))?;
    for s in &summary {
        w.serialize(s).map_err(|e| Error::format(&table_csv, e.to_string()))?;
    }
    w.flush()?;
    let table_markdown = base.out_dir.join(format!("ablation_{}.md", axis.name()));
    std::fs::write(&table_markdown, markdown_table(axis, &summary))?;

    Ok(AblationReport {
        axis,
        runs,
        summary,
        table_csv,
        table_markdown,
    })
}

pub fn markdown_table(axis: AblationAxis, summary: &[AblationSummary]) -> String {
    let mut s = format!(
        "| {axis} | seeds | AUC (mean ± 95% CI) | final return (mean ± 95% CI) |\n|---|---|---|---|\n"
    );
    for r in summary {
        s.push_str(&format!(
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
            r.value, r.seeds, r.auc_mean, r.auc_ci95, r.final_mean, r.final_ci95
        ));
    }
    s
}

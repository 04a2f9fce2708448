//! Learning-curve plots: mean return across seeds with a 95% confidence
//! band, against environment frames and against wall-clock time.

use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, MetricRow};

/// Two-sided 95% critical value of Student's t with `dof` degrees of freedom.
pub fn t_critical_95(dof: usize) -> f64 {
    assert!(dof > 0, "t distribution needs at least one degree of freedom");
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("valid t parameters")
        .inverse_cdf(0.975)
}

/// Mean and the half-width of its 95% t-interval; the half-width is zero for
/// a single sample.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 0, "mean of no samples");
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, t_critical_95(n - 1) * (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub seeds: usize,
}

/// Which column the curve is drawn against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    EnvFrames,
    WallClock,
}

impl XAxis {
    fn value(self, row: &MetricRow) -> f64 {
        match self {
            XAxis::EnvFrames => row.env_frame as f64,
            XAxis::WallClock => row.wall_clock_s,
        }
    }

    fn label(self) -> &'static str {
        match self {
            XAxis::EnvFrames => "environment frames",
            XAxis::WallClock => "wall clock (s)",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            XAxis::EnvFrames => "return_vs_frames",
            XAxis::WallClock => "return_vs_wall_clock",
        }
    }
}

/// Aligns seeds by evaluation index, up to the shortest run. The x value of a
/// point is the mean over seeds (identical for frames).
pub fn aggregate(runs: &[Vec<MetricRow>], axis: XAxis) -> Vec<BandPoint> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| {
            let ys: Vec<f64> = runs.iter().map(|r| r[k].episode_return).collect();
            let x = runs.iter().map(|r| axis.value(&r[k])).sum::<f64>() / runs.len() as f64;
            let (mean, half) = mean_ci95(&ys);
            BandPoint {
                x,
                mean,
                lo: mean - half,
                hi: mean + half,
                seeds: ys.len(),
            }
        })
        .collect()
}

/// One labelled curve, each file one seed.
#[derive(Debug, Clone)]
pub struct CurveSource {
    pub label: String,
    pub files: Vec<PathBuf>,
}

impl CurveSource {
    /// A run directory: every `seed_*/metrics.csv` under it.
    pub fn from_run_dir(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path().join(super::metrics::METRICS_FILE))
            .filter(|p| p.exists())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("no metrics files under {}", dir.display())));
        }
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self { label, files })
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw(curves: &[(String, Vec<BandPoint>)], axis: XAxis, path: &Path) -> Result<()> {
    let points = curves.iter().flat_map(|(_, c)| c.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.lo);
        y1 = y1.max(p.hi);
    }
    if x0 > x1 {
        return Err(Error::config("nothing to plot: every metrics file is empty"));
    }
    let pad_y = ((y1 - y0) * 0.05).max(1.0);
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad_y)..(y1 + pad_y))
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(axis.label())
        .y_desc("episode return")
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (label, band)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let outline: Vec<(f64, f64)> = band
            .iter()
            .map(|p| (p.x, p.hi))
            .chain(band.iter().rev().map(|p| (p.x, p.lo)))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(outline, color.mix(0.2).filled())))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(LineSeries::new(band.iter().map(|p| (p.x, p.mean)), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Writes `return_vs_frames.svg`, `return_vs_wall_clock.svg` and the band
/// values as `curves.json` into `out_dir`.
pub fn plot(curves: &[CurveSource], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.iter().all(|c| c.files.is_empty()) {
        return Err(Error::config("plot needs at least one metrics file"));
    }
    std::fs::create_dir_all(out_dir)?;
    let runs: Vec<(String, Vec<Vec<MetricRow>>)> = curves
        .iter()
        .map(|c| {
            let rows = c.files.iter().map(|f| read_metrics(f)).collect::<Result<Vec<_>>>()?;
            Ok((c.label.clone(), rows))
        })
        .collect::<Result<_>>()?;
    let mut written = Vec::new();
    let mut summary = serde_json::Map::new();
    for axis in [XAxis::EnvFrames, XAxis::WallClock] {
        let bands: Vec<(String, Vec<BandPoint>)> = runs
            .iter()
            .map(|(label, rows)| (label.clone(), aggregate(rows, axis)))
            .collect();
        let path = out_dir.join(format!("{}.svg", axis.file_stem()));
        draw(&bands, axis, &path)?;
        written.push(path);
        summary.insert(
            axis.file_stem().to_string(),
            serde_json::to_value(bands.iter().map(|(l, b)| (l, b)).collect::<Vec<_>>()).expect("serializable"),
        );
    }
    let json = out_dir.join("curves.json");
    std::fs::write(&json, serde_json::to_vec_pretty(&summary).expect("serializable"))?;
    written.push(json);
    Ok(written)
}

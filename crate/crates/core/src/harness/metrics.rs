//! Evaluation metrics as CSV, one row per evaluation, flushed as written.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_EPISODES_FILE: &str = "train_episodes.csv";

/// Columns that depend on the wall clock.
pub const WALL_CLOCK_COLUMNS: [&str; 2] = ["wall_clock_s", "fps"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub env_frame: u64,
    pub wall_clock_s: f64,
    /// Mean evaluation return.
    pub episode_return: f64,
    /// Environment frames per second since the run (or resume) started.
    pub fps: f64,
    /// Most recent losses; absent before the first update.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainEpisodeRow {
    pub env_frame: u64,
    pub episode: u64,
    pub episode_return: f64,
}

/// Append-only CSV writer that flushes after every row.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    /// Opens `path` for appending, writing the header when the file is new.
    pub fn append(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self {
            path: path.to_owned(),
            writer,
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::format(&self.path, e.to_string()))?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads rows, naming the first malformed row in the error.
pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize().enumerate() {
        let row: T = rec.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let rows: Vec<MetricRow> = read_rows(path)?;
    for (i, pair) in rows.windows(2).enumerate() {
        if pair[1].env_frame < pair[0].env_frame {
            return Err(Error::format(
                path,
                format!("row {}: env_frame {} decreases", i + 2, pair[1].env_frame),
            ));
        }
    }
    Ok(rows)
}

/// Keeps the header and the rows whose first column (env frame) is at most
/// `max_frame`, discarding anything after. Used when resuming.
pub fn truncate_after(path: &Path, max_frame: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = BufReader::new(File::open(path)?);
    let mut kept = String::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i > 0 {
            let frame: u64 = line
                .split(',')
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(path, format!("row {i}: bad env_frame")))?;
            if frame > max_frame {
                break;
            }
        }
        kept.push_str(&line);
        kept.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, kept)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// The CSV text with the wall-clock columns removed.
pub fn without_wall_clock(path: &Path) -> Result<String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let keep: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !WALL_CLOCK_COLUMNS.contains(h))
        .map(|(i, _)| i)
        .collect();
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(keep.iter().map(|&i| &headers[i]))
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (n, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, format!("row {}: {e}", n + 1)))?;
            w.write_record(keep.iter().map(|&i| &rec[i]))
                .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(String::from_utf8(out).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(frame: u64, ret: f64) -> MetricRow {
        MetricRow {
            env_frame: frame,
            wall_clock_s: frame as f64 * 0.01,
            episode_return: ret,
            fps: 100.0,
            critic_loss: (frame > 0).then_some(0.5),
            actor_loss: None,
            sigma: 0.4,
        }
    }

    #[test]
    fn append_read_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        {
            let mut log = CsvLog::append(&path).unwrap();
            log.write(&row(0, 1.0)).unwrap();
            log.write(&row(100, 2.0)).unwrap();
        }
        {
            let mut log = CsvLog::append(&path).unwrap();
            log.write(&row(200, 3.0)).unwrap();
        }
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows, vec![row(0, 1.0), row(100, 2.0), row(200, 3.0)]);
        truncate_after(&path, 100).unwrap();
        assert_eq!(read_metrics(&path).unwrap().len(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("env_frame,wall_clock_s,episode_return,fps,critic_loss,actor_loss,sigma\n"));
    }

    #[test]
    fn malformed_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(
            &path,
            "env_frame,wall_clock_s,episode_return,fps,critic_loss,actor_loss,sigma\n10,1,2,3,,,0.5\n20,1,oops,3,,,0.5\n",
        )
        .unwrap();
        let err = read_metrics(&path).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
    }

    #[test]
    fn wall_clock_columns_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        for (p, scale) in [(&a, 1.0), (&b, 7.0)] {
            let mut log = CsvLog::append(p).unwrap();
            let mut r = row(10, 1.5);
            r.wall_clock_s *= scale;
            r.fps *= scale;
            log.write(&r).unwrap();
        }
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(without_wall_clock(&a).unwrap(), without_wall_clock(&b).unwrap());
        assert!(without_wall_clock(&a).unwrap().starts_with("env_frame,episode_return,critic_loss"));
    }
}

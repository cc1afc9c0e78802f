//! Append-only metrics log and the plot-data exporter.
//!
//! Rows are `(frames, phase, task, condition, seed, metric, value)`,
//! strictly ordered by frames within a seed file. Wall-clock timing is
//! deliberately kept out of this file (it lives in `run.log`), so a rerun
//! with the same seed produces a byte-identical metrics file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "frames,phase,task,condition,seed,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub frames: u64,
    pub phase: String,
    pub task: String,
    pub condition: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.frames, self.phase, self.task, self.condition, self.seed, self.metric, self.value
        )
    }

    fn parse(line: &str) -> Result<MetricRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::format(format!("bad metrics row: {line}")));
        }
        Ok(MetricRow {
            frames: parts[0].parse().map_err(|_| Error::format(format!("bad frames in: {line}")))?,
            phase: parts[1].to_string(),
            task: parts[2].to_string(),
            condition: parts[3].to_string(),
            seed: parts[4].parse().map_err(|_| Error::format(format!("bad seed in: {line}")))?,
            metric: parts[5].to_string(),
            value: parts[6].parse().map_err(|_| Error::format(format!("bad value in: {line}")))?,
        })
    }
}

/// In-memory row buffer bound to one seed's metrics file. Rows accumulate
/// per phase and are flushed at phase completion, so a resumed run never
/// carries half-written phases.
pub struct MetricsLog {
    path: PathBuf,
    pending: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn open(path: PathBuf) -> Result<Self> {
        if !path.exists() {
            std::fs::write(&path, format!("{METRICS_HEADER}\n"))?;
        }
        Ok(MetricsLog { path, pending: Vec::new() })
    }

    pub fn push(&mut self, row: MetricRow) {
        self.pending.push(row);
    }

    /// Append all pending rows to the file.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut text = String::new();
        for row in &self.pending {
            writeln!(text, "{}", row.to_csv()).expect("string write");
        }
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(text.as_bytes())?;
        self.pending.clear();
        Ok(())
    }

    /// Drop pending rows (an interrupted phase must leave no trace).
    pub fn discard_pending(&mut self) {
        self.pending.clear();
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::format(format!("unexpected metrics header: {line}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        rows.push(MetricRow::parse(line)?);
    }
    Ok(rows)
}

/// Rewrite a metrics file keeping only rows from completed phases
/// (identified by their `phase-task` ids). Used on resume.
pub fn retain_completed_phases(path: &Path, completed: &[String]) -> Result<()> {
    let rows = read_metrics(path)?;
    let kept: Vec<&MetricRow> = rows
        .iter()
        .filter(|r| completed.contains(&format!("{}-{}", r.phase, r.task)))
        .collect();
    let mut text = format!("{METRICS_HEADER}\n");
    for row in kept {
        writeln!(text, "{}", row.to_csv()).expect("string write");
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Evaluation series of one metric name: (frames, value) in file order.
pub fn metric_series(rows: &[MetricRow], metric: &str) -> Vec<(u64, f64)> {
    rows.iter().filter(|r| r.metric == metric).map(|r| (r.frames, r.value)).collect()
}

/// The reference score for retention: the last long-term evaluation of
/// `task` logged during its own consolidation phase.
pub fn reference_score(rows: &[MetricRow], task: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.metric == format!("eval_mean/{task}") && r.phase == "ltm" && r.task == task)
        .map(|r| r.value)
        .last()
}

/// The latest long-term evaluation of `task` anywhere in the run.
pub fn final_score(rows: &[MetricRow], task: &str) -> Option<f64> {
    rows.iter().filter(|r| r.metric == format!("eval_mean/{task}")).map(|r| r.value).last()
}

/// Export one score-curve CSV per task: frames, mean, stdev and a
/// task-switch marker column. Deterministic formatting; re-export is
/// byte-identical.
pub fn export_plot_data(seed_dir: &Path, boundaries: &[u64]) -> Result<Vec<PathBuf>> {
    let metrics_path = seed_dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(Error::contract(format!("no metrics.csv under {}", seed_dir.display())));
    }
    let rows = read_metrics(&metrics_path)?;
    if rows.is_empty() {
        return Err(Error::contract("metrics file holds no rows"));
    }
    let plots = seed_dir.join("plots");
    std::fs::create_dir_all(&plots)?;

    let mut tasks: Vec<String> = Vec::new();
    for r in &rows {
        if let Some(task) = r.metric.strip_prefix("eval_mean/") {
            if !tasks.iter().any(|t| t == task) {
                tasks.push(task.to_string());
            }
        }
    }

    let condition = rows[0].condition.clone();
    let mut written = Vec::new();
    for task in &tasks {
        let means = metric_series(&rows, &format!("eval_mean/{task}"));
        let stds = metric_series(&rows, &format!("eval_std/{task}"));
        let mut text = String::from("frames,mean_score,stdev,task_switch\n");
        for (i, (frames, mean)) in means.iter().enumerate() {
            let std = stds.get(i).map(|(_, v)| *v).unwrap_or(0.0);
            let switch = boundaries.contains(frames) as u8;
            writeln!(text, "{frames},{mean},{std},{switch}").expect("string write");
        }
        let path = plots.join(format!("{condition}-{task}.csv"));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

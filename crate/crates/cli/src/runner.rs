//! Executes runs in parallel and serializes their records through one writer.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use gradcal::metrics::{
    faa, faia, ff, footprint, mean_stderr, smoothness_stats, FootprintReport, SmoothnessStats,
};
use gradcal::{run_cil, run_tfcl, Method, RunOutput, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, RunMode};

/// A hyperparameter that `sweep` varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    BufferCapacity,
    Alpha,
    M,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::BufferCapacity => "buffer_capacity",
            Axis::Alpha => "alpha",
            Axis::M => "m",
        }
    }

    /// Returns `train` with the axis set to `value`.
    pub fn apply(self, train: &TrainConfig, value: f64) -> Result<TrainConfig, String> {
        let mut out = train.clone();
        let as_count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(format!(
                    "{} values must be positive integers, got {value}",
                    self.name()
                ))
            }
        };
        match self {
            Axis::BufferCapacity => out.buffer_capacity = as_count()?,
            Axis::M => out.steps_per_stage = as_count()?,
            Axis::Alpha => out.alpha = value,
        }
        out.validate().map_err(|e| e.to_string())?;
        Ok(out)
    }
}

/// One line of the JSON-lines output.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<f64>,
    pub seed: u64,
    pub method: Method,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub faia: Option<f64>,
    pub faa: Option<f64>,
    pub ff: Option<f64>,
    pub aa_series: Vec<(u64, f64)>,
    pub footprint: FootprintReport,
    pub smoothness: Option<SmoothnessStats>,
    pub final_loss: Option<f64>,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub loss: Vec<(u64, f64)>,
}

/// One (configuration, seed, method) cell.
struct Job<'a> {
    config: &'a ExperimentConfig,
    hash: &'a str,
    axis: Option<(Axis, f64)>,
    seed: u64,
    method: Method,
}

impl Job<'_> {
    fn execute(&self) -> ResultRecord {
        let start = Instant::now();
        let train = TrainConfig {
            method: self.method,
            seed: self.seed,
            ..self.config.train.clone()
        };
        let outcome =
            self.config
                .build_stream(self.seed)
                .and_then(|stream| match self.config.mode {
                    RunMode::Cil => run_cil(&stream, &self.config.model, &train),
                    RunMode::Tfcl => run_tfcl(&stream, &self.config.model, &train),
                });
        let mut record = ResultRecord {
            config_hash: self.hash.to_string(),
            axis: self.axis.map(|(a, _)| a.name()),
            axis_value: self.axis.map(|(_, v)| v),
            seed: self.seed,
            method: self.method,
            status: "ok",
            error: None,
            faia: None,
            faa: None,
            ff: None,
            aa_series: Vec::new(),
            footprint: footprint(
                self.method,
                train.buffer_capacity,
                &self.config.model,
                self.config.sample_bytes,
            ),
            smoothness: None,
            final_loss: None,
            wall_clock_seconds: 0.0,
            loss: Vec::new(),
        };
        match outcome.and_then(|out| fill_metrics(&mut record, out)) {
            Ok(()) => {}
            Err(e) => {
                record.status = "failed";
                record.error = Some(e.to_string());
            }
        }
        record.wall_clock_seconds = start.elapsed().as_secs_f64();
        record
    }
}

fn fill_metrics(record: &mut ResultRecord, out: RunOutput) -> gradcal::Result<()> {
    record.faia = Some(faia(&out.accuracy)?);
    record.faa = Some(faa(&out.accuracy)?);
    record.ff = Some(ff(&out.accuracy)?);
    record.aa_series = out.aa_series;
    record.smoothness = smoothness_stats(&out.loss).ok();
    record.final_loss = out.loss.final_loss();
    record.loss = out.loss.points().to_vec();
    Ok(())
}

/// Runs every cell on the current rayon pool and returns records in cell order.
pub fn execute(configs: &[(Option<(Axis, f64)>, ExperimentConfig)]) -> Vec<ResultRecord> {
    let hashes: Vec<String> = configs.iter().map(|(_, c)| c.hash()).collect();
    let mut jobs = Vec::new();
    for ((axis, config), hash) in configs.iter().zip(&hashes) {
        for &seed in &config.seeds {
            for &method in &config.methods {
                jobs.push(Job {
                    config,
                    hash,
                    axis: *axis,
                    seed,
                    method,
                });
            }
        }
    }
    jobs.par_iter().map(Job::execute).collect()
}

/// Appends records as JSON lines and writes the plot-ready series CSV.
pub fn write_outputs(records: &[ResultRecord], out: &Path, series: &Path) -> anyhow::Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .with_context(|| format!("cannot open {}", out.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(
        File::create(series).with_context(|| format!("cannot create {}", series.display()))?,
    );
    writeln!(w, "config_hash,axis_value,seed,method,series,x,y")?;
    for r in records {
        let value = r.axis_value.map(|v| v.to_string()).unwrap_or_default();
        let rows = r
            .loss
            .iter()
            .map(|p| ("loss", p))
            .chain(r.aa_series.iter().map(|p| ("aa", p)));
        for (name, (x, y)) in rows {
            writeln!(
                w,
                "{},{value},{},{},{name},{x},{y}",
                r.config_hash, r.seed, r.method
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard error of one metric over the successful runs of a group.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub axis_value: Option<f64>,
    pub method: Method,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

type Metric = (&'static str, fn(&ResultRecord) -> Option<f64>);

const METRICS: [Metric; 3] = [("faia", |r| r.faia), ("faa", |r| r.faa), ("ff", |r| r.ff)];

type Group<'a> = (Option<f64>, Vec<&'a ResultRecord>);

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u64, Method), Group> = BTreeMap::new();
    let mut order: Vec<(u64, Method)> = Vec::new();
    for r in records {
        let key = (r.axis_value.unwrap_or(f64::NAN).to_bits(), r.method);
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups
            .entry(key)
            .or_insert((r.axis_value, Vec::new()))
            .1
            .push(r);
    }
    let mut rows = Vec::new();
    for key in order {
        let (axis_value, members) = &groups[&key];
        for (metric, get) in METRICS {
            let values: Vec<f64> = members.iter().filter_map(|r| get(r)).collect();
            let (mean, stderr) = mean_stderr(&values);
            rows.push(SummaryRow {
                axis_value: *axis_value,
                method: key.1,
                metric,
                n: values.len(),
                mean,
                stderr,
            });
        }
    }
    rows
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    );
    writeln!(w, "axis_value,method,metric,n,mean,stderr")?;
    for r in rows {
        let value = r.axis_value.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{value},{},{},{},{},{}",
            r.method, r.metric, r.n, r.mean, r.stderr
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cell(row: &SummaryRow) -> String {
    format!("{:.2} ± {:.2}", 100.0 * row.mean, 100.0 * row.stderr)
}

/// Table of FAIA, FAA and FF (percent, mean ± standard error) per method.
pub fn render_run_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<14}{:>18}{:>18}{:>18}{:>6}\n",
        "method", "FAIA (%)", "FAA (%)", "FF (%)", "n"
    );
    for chunk in rows.chunks(METRICS.len()) {
        out.push_str(&format!(
            "{:<14}{:>18}{:>18}{:>18}{:>6}\n",
            chunk[0].method.name(),
            cell(&chunk[0]),
            cell(&chunk[1]),
            cell(&chunk[2]),
            chunk[0].n
        ));
    }
    out
}

/// FAIA (percent, mean ± standard error) with one column per axis value.
pub fn render_sweep_table(axis: Axis, values: &[f64], rows: &[SummaryRow]) -> String {
    let mut out = format!("FAIA (%) by {}\n{:<14}", axis.name(), "method");
    for v in values {
        out.push_str(&format!("{:>18}", v.to_string()));
    }
    out.push('\n');
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for m in methods {
        out.push_str(&format!("{:<14}", m.name()));
        for v in values {
            let row = rows.iter().find(|r| {
                r.method == m
                    && r.metric == "faia"
                    && r.axis_value.map(f64::to_bits) == Some(v.to_bits())
            });
            out.push_str(&format!("{:>18}", row.map(cell).unwrap_or_default()));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_apply_checks_types() {
        let base = TrainConfig::default();
        assert_eq!(Axis::M.apply(&base, 300.0).unwrap().steps_per_stage, 300);
        assert_eq!(
            Axis::BufferCapacity
                .apply(&base, 50.0)
                .unwrap()
                .buffer_capacity,
            50
        );
        assert_eq!(Axis::Alpha.apply(&base, 0.0).unwrap().alpha, 0.0);
        assert!(Axis::M.apply(&base, 0.0).is_err());
        assert!(Axis::BufferCapacity.apply(&base, 2.5).is_err());
        assert!(Axis::Alpha.apply(&base, 1.5).is_err());
    }
}

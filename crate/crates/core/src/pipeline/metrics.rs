use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhaseReport, RunConfig};
use crate::error::{OdpError, Result};

/// One line of a metrics CSV: one env at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: String,
    pub update_or_step: u64,
    pub env_name: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_q_src0: Option<f64>,
    pub mean_q_src1: Option<f64>,
    pub loss_critic: Option<f64>,
    pub loss_policy: Option<f64>,
    pub transform: String,
    pub beta: Option<f64>,
    pub ratio_spec: String,
    pub seed: u64,
}

/// Labels describing the run a report came from.
#[derive(Debug, Clone, Default)]
pub struct RowContext {
    pub transform: String,
    pub beta: Option<f64>,
    pub ratio_spec: String,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Flattens a report to rows; `q` optionally supplies per-source mean Q at
/// each evaluation point, matched by position.
pub fn report_rows(
    report: &PhaseReport,
    cfg: &RunConfig,
    ctx: &RowContext,
    q: Option<&[(f64, f64)]>,
) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (i, point) in report.records.iter().enumerate() {
        let qs = q.and_then(|q| q.get(i)).copied();
        for r in &point.returns {
            rows.push(MetricRow {
                phase: report.phase.clone(),
                update_or_step: point.step,
                env_name: r.name.clone(),
                mean_return: r.mean,
                std_return: r.std,
                mean_q_src0: qs.map(|q| q.0),
                mean_q_src1: qs.map(|q| q.1),
                loss_critic: finite(point.loss_critic),
                loss_policy: finite(point.loss_policy),
                transform: ctx.transform.clone(),
                beta: ctx.beta,
                ratio_spec: ctx.ratio_spec.clone(),
                seed: cfg.seed,
            });
        }
    }
    rows
}

pub const METRIC_COLUMNS: [&str; 13] = [
    "phase",
    "update_or_step",
    "env_name",
    "mean_return",
    "std_return",
    "mean_q_src0",
    "mean_q_src1",
    "loss_critic",
    "loss_policy",
    "transform",
    "beta",
    "ratio_spec",
    "seed",
];

/// Appending metrics sink. A new or empty file gets the header first; every
/// `write` is flushed before returning.
pub struct MetricsWriter {
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            inner.write_record(METRIC_COLUMNS).map_err(csv_err)?;
            inner.flush()?;
        }
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, rows: &[MetricRow]) -> Result<()> {
        for row in rows {
            self.inner.serialize(row).map_err(csv_err)?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

/// Appends `rows` to the CSV at `path`, one flush per evaluation point.
pub fn export_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::open(path)?;
    let mut start = 0;
    for end in 1..=rows.len() {
        let boundary = end == rows.len()
            || rows[end].phase != rows[start].phase
            || rows[end].update_or_step != rows[start].update_or_step;
        if boundary {
            w.write(&rows[start..end])?;
            start = end;
        }
    }
    Ok(())
}

/// Replaces the file at `path` with exactly `rows`.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if path.exists() {
        fs::remove_file(path)?;
    }
    export_metrics(rows, path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> OdpError {
    let offset = e.position().map_or(0, |p| p.byte());
    let message = format!("metrics csv: {e}");
    match e.into_kind() {
        csv::ErrorKind::Io(io) => OdpError::Io(io),
        _ => OdpError::format(offset, message),
    }
}

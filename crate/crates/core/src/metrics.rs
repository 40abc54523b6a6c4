//! Coverage and width metrics over an evaluation window.
//!
//! - per-series coverage `C̄_i`: fraction of window steps whose interval
//!   contains the truth;
//! - mean coverage: average of `C̄_i` over test series;
//! - tail coverage: average of the `⌈0.1 M⌉` smallest `C̄_i`;
//! - mean width: average interval width, `+∞` if any interval is unbounded.
//!
//! Tail coverage is compared across methods after rescaling every method to
//! the split-conformal mean width with one global factor.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{IntervalSet, Method};
use crate::numfmt::{csv_num, mean_pm_sd};
use crate::order;
use crate::panel::PanelData;

/// Share of test series forming the tail.
pub const TAIL_FRACTION: f64 = 0.1;
/// Smallest test set on which tail coverage is defined.
pub const MIN_TAIL_SERIES: usize = 10;
/// Default evaluation window length.
pub const DEFAULT_LAST_STEPS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("evaluation window {window} does not fit horizon {horizon}")]
    WindowOutOfRange { window: EvalWindow, horizon: usize },
    #[error("no test series")]
    EmptyTestSet,
    #[error("tail coverage needs at least {MIN_TAIL_SERIES} test series, got {0}")]
    TooFewSeries(usize),
    #[error("mean width is unbounded")]
    UnboundedWidth,
    #[error("mean width is zero")]
    ZeroWidth,
    #[error("intervals do not line up with the truth panel: {0}")]
    Misaligned(String),
}

/// Steps included in the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWindow {
    LastK(usize),
    Full,
}

impl Default for EvalWindow {
    fn default() -> Self {
        EvalWindow::LastK(DEFAULT_LAST_STEPS)
    }
}

impl EvalWindow {
    pub fn range(&self, horizon: usize) -> Result<Range<usize>, MetricsError> {
        match *self {
            EvalWindow::Full if horizon > 0 => Ok(0..horizon),
            EvalWindow::LastK(k) if k > 0 && k <= horizon => Ok(horizon - k..horizon),
            _ => Err(MetricsError::WindowOutOfRange { window: *self, horizon }),
        }
    }
}

impl fmt::Display for EvalWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalWindow::LastK(k) => write!(f, "last:{k}"),
            EvalWindow::Full => f.write_str("full"),
        }
    }
}

impl FromStr for EvalWindow {
    type Err = String;

    /// Accepts `full`, `last:K` or a bare `K`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "full" {
            return Ok(EvalWindow::Full);
        }
        let k = s.strip_prefix("last:").unwrap_or(s);
        k.parse()
            .ok()
            .filter(|&k| k > 0)
            .map(EvalWindow::LastK)
            .ok_or_else(|| format!("bad evaluation window `{s}` (expected `full` or `last:K`)"))
    }
}

fn check_aligned(set: &IntervalSet, truths: &PanelData) -> Result<(), MetricsError> {
    if set.n_series() != truths.len() {
        return Err(MetricsError::Misaligned(format!("{} interval rows, {} series", set.n_series(), truths.len())));
    }
    for (row, id) in set.intervals.iter().zip(truths.ids()) {
        if row.len() != truths.horizon() || row.first().is_some_and(|iv| iv.series_id != id) {
            return Err(MetricsError::Misaligned(format!("row for `{id}`")));
        }
    }
    Ok(())
}

/// `C̄_i` for every test series over the window.
pub fn coverage_per_series(set: &IntervalSet, truths: &PanelData, window: EvalWindow) -> Result<Vec<f64>, MetricsError> {
    check_aligned(set, truths)?;
    let range = window.range(truths.horizon())?;
    let len = range.len() as f64;
    Ok(set
        .intervals
        .iter()
        .zip(truths.series())
        .map(|(row, s)| range.clone().filter(|&t| row[t].contains(s.y[t])).count() as f64 / len)
        .collect())
}

pub fn mean_coverage(per_series: &[f64]) -> Result<f64, MetricsError> {
    if per_series.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    Ok(per_series.iter().sum::<f64>() / per_series.len() as f64)
}

/// Mean of the `⌈fraction · M⌉` smallest values (ties by index).
pub fn bottom_fraction_mean(per_series: &[f64], fraction: f64) -> Result<f64, MetricsError> {
    if per_series.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let count = order::ceil_rank(fraction * per_series.len() as f64).clamp(1, per_series.len());
    let idx = order::argsort(per_series);
    Ok(idx[..count].iter().map(|&i| per_series[i]).sum::<f64>() / count as f64)
}

/// Mean coverage of the least-covered 10% of test series.
pub fn tail_coverage(per_series: &[f64]) -> Result<f64, MetricsError> {
    if per_series.len() < MIN_TAIL_SERIES {
        return Err(MetricsError::TooFewSeries(per_series.len()));
    }
    bottom_fraction_mean(per_series, TAIL_FRACTION)
}

/// Mean of `upper - lower` over the window; `+∞` if any interval is unbounded.
pub fn mean_width(set: &IntervalSet, window: EvalWindow) -> Result<f64, MetricsError> {
    if set.n_series() == 0 {
        return Err(MetricsError::EmptyTestSet);
    }
    let range = window.range(set.horizon())?;
    let cells = (set.n_series() * range.len()) as f64;
    let mut total = 0.0;
    for row in &set.intervals {
        for iv in &row[range.clone()] {
            if iv.is_unbounded() {
                return Ok(f64::INFINITY);
            }
            total += iv.width();
        }
    }
    Ok(total / cells)
}

/// Multiplies every half-width of `method` by `ρ = width(ref) / width(method)`
/// so both have the same mean width over the window. Returns the rescaled
/// set and `ρ`.
pub fn rescale_to_reference(
    method: &IntervalSet,
    reference: &IntervalSet,
    window: EvalWindow,
) -> Result<(IntervalSet, f64), MetricsError> {
    let w_ref = mean_width(reference, window)?;
    let w_method = mean_width(method, window)?;
    if w_ref.is_infinite() || w_method.is_infinite() {
        return Err(MetricsError::UnboundedWidth);
    }
    if w_ref <= 0.0 || w_method <= 0.0 {
        return Err(MetricsError::ZeroWidth);
    }
    let rho = w_ref / w_method;
    Ok((method.scaled(rho), rho))
}

/// Metrics of one method on one test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub mean_coverage: f64,
    /// `None` with fewer than ten test series.
    pub tail_coverage: Option<f64>,
    pub mean_width: f64,
    /// Tail coverage after rescaling to the split-conformal mean width.
    pub tail_coverage_scaled: Option<f64>,
    pub width_scale: Option<f64>,
    pub per_series: Vec<f64>,
}

impl MethodMetrics {
    /// `(name, value)` pairs of the scalar metrics that are defined.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("mean_coverage", self.mean_coverage)];
        if let Some(v) = self.tail_coverage {
            out.push(("tail_coverage", v));
        }
        out.push(("mean_width", self.mean_width));
        if let Some(v) = self.tail_coverage_scaled {
            out.push(("tail_coverage_scaled", v));
        }
        if let Some(v) = self.width_scale {
            out.push(("width_scale", v));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub n_cal: usize,
    pub n_test: usize,
    pub horizon: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub methods: Vec<MethodMetrics>,
    pub window: EvalWindow,
    pub meta: ReportMeta,
}

impl ExperimentReport {
    pub fn get(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Computes every metric for every interval set.
pub fn evaluate(sets: &[IntervalSet], truths: &PanelData, window: EvalWindow, meta: ReportMeta) -> Result<ExperimentReport, MetricsError> {
    let reference = sets.iter().find(|s| s.method == Method::Split);
    let methods = sets
        .iter()
        .map(|set| {
            let per_series = coverage_per_series(set, truths, window)?;
            let scaled = match reference.map(|r| rescale_to_reference(set, r, window)) {
                Some(Ok((rescaled, rho))) => {
                    let c = coverage_per_series(&rescaled, truths, window)?;
                    Some((tail_coverage(&c).ok(), rho))
                }
                _ => None,
            };
            Ok(MethodMetrics {
                method: set.method,
                mean_coverage: mean_coverage(&per_series)?,
                tail_coverage: tail_coverage(&per_series).ok(),
                mean_width: mean_width(set, window)?,
                tail_coverage_scaled: scaled.and_then(|(t, _)| t),
                width_scale: scaled.map(|(_, rho)| rho),
                per_series,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(ExperimentReport { methods, window, meta })
}

/// `method,metric,value` rows.
pub fn write_report_csv<W: Write>(report: &ExperimentReport, writer: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["method", "metric", "value"])?;
    for m in &report.methods {
        for (name, value) in m.scalars() {
            wtr.write_record([m.method.as_str(), name, &csv_num(value)])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Mean and spread of one metric across replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single replicate).
    pub sd: f64,
    /// `sd / √n`.
    pub se: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || mean.is_infinite() {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates replicate reports metric by metric, in first-seen order.
pub fn summarize(reports: &[ExperimentReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, &'static str)> = Vec::new();
    for r in reports {
        for m in &r.methods {
            for (name, _) in m.scalars() {
                if !keys.contains(&(m.method, name)) {
                    keys.push((m.method, name));
                }
            }
        }
    }
    keys.into_iter()
        .map(|(method, metric)| {
            let values: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.get(method))
                .filter_map(|m| m.scalars().into_iter().find(|(k, _)| *k == metric).map(|(_, v)| v))
                .collect();
            let (mean, sd) = mean_sd(&values);
            let se = sd / (values.len() as f64).sqrt();
            SummaryRow { method, metric: metric.to_string(), mean, sd, se, n: values.len() }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["method", "metric", "mean", "sd", "se", "replicates"])?;
    for r in rows {
        wtr.write_record([
            r.method.as_str(),
            &r.metric,
            &csv_num(r.mean),
            &csv_num(r.sd),
            &csv_num(r.se),
            &r.n.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn is_rate(metric: &str) -> bool {
    metric.contains("coverage")
}

/// Plain-text table, one line per metric: rates in percent, widths as-is,
/// each cell `mean±sd` with two decimals.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let mut out = format!("{:<22}", "metric");
    for m in &methods {
        out.push_str(&format!(" {:>16}", m.as_str()));
    }
    out.push('\n');
    for metric in metrics {
        out.push_str(&format!("{metric:<22}"));
        for m in &methods {
            let cell = rows
                .iter()
                .find(|r| r.method == *m && r.metric == metric)
                .map(|r| {
                    let k = if is_rate(metric) { 100.0 } else { 1.0 };
                    mean_pm_sd(k * r.mean, k * r.sd)
                })
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(" {cell:>16}"));
        }
        out.push('\n');
    }
    out
}

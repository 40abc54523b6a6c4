//! Panel data model, long-CSV ingestion and train/calibration/test splitting.
//!
//! A panel is an `N × T` grid of responses with optional `d`-dimensional
//! covariates per cell. On disk it is a long CSV with one row per
//! `(series, step)`:
//!
//! ```text
//! series_id,t,y,x0,x1
//! a,0,1.5,0.2,1
//! a,1,1.7,0.3,1
//! ```
//!
//! Steps are 0-based. Lines starting with `#` are comments.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("series `{series}` is missing step {step}")]
    RaggedSeries { series: String, step: usize },
    #[error("non-finite value in series `{series}` at step {step}")]
    NonFiniteValue { series: String, step: usize },
    #[error("duplicate cell for series `{series}` at step {step}")]
    DuplicateCell { series: String, step: usize },
    #[error("cannot parse `{value}` in column `{column}` (line {line})")]
    InvalidValue { column: String, value: String, line: u64 },
    #[error("panel has no series")]
    EmptyPanel,
    #[error("duplicate series id `{0}`")]
    DuplicateSeries(String),
    #[error("series `{series}` has shape inconsistent with T={horizon}, d={feature_dim}")]
    ShapeMismatch { series: String, horizon: usize, feature_dim: usize },
    #[error("split sizes {requested} exceed the {available} series of the panel")]
    SizesExceedPanel { requested: usize, available: usize },
    #[error("split block sizes must be positive")]
    EmptyBlock,
}

/// One time series: responses and a row-major `T × d` covariate block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: String,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl SeriesRecord {
    pub fn new(id: impl Into<String>, y: Vec<f64>) -> Self {
        Self { id: id.into(), y, x: Vec::new() }
    }

    pub fn with_covariates(id: impl Into<String>, y: Vec<f64>, x: Vec<f64>) -> Self {
        Self { id: id.into(), y, x }
    }

    /// Covariate row at step `t` (empty when `d = 0`).
    pub fn x_at(&self, t: usize, feature_dim: usize) -> &[f64] {
        &self.x[t * feature_dim..(t + 1) * feature_dim]
    }
}

/// Validated `N × T` panel. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    series: Vec<SeriesRecord>,
    horizon: usize,
    feature_dim: usize,
}

impl PanelData {
    /// Builds a panel, checking shapes, id uniqueness and finiteness.
    pub fn new(series: Vec<SeriesRecord>, feature_dim: usize) -> Result<Self, PanelError> {
        let horizon = series.first().ok_or(PanelError::EmptyPanel)?.y.len();
        let mut seen = HashMap::with_capacity(series.len());
        for s in &series {
            if s.y.len() != horizon || s.x.len() != horizon * feature_dim || horizon == 0 {
                return Err(PanelError::ShapeMismatch {
                    series: s.id.clone(),
                    horizon,
                    feature_dim,
                });
            }
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(PanelError::DuplicateSeries(s.id.clone()));
            }
            if let Some(t) = s.y.iter().position(|v| !v.is_finite()) {
                return Err(PanelError::NonFiniteValue { series: s.id.clone(), step: t });
            }
            if let Some(k) = s.x.iter().position(|v| !v.is_finite()) {
                let step = k.checked_div(feature_dim).unwrap_or(0);
                return Err(PanelError::NonFiniteValue { series: s.id.clone(), step });
            }
        }
        Ok(Self { series, horizon, feature_dim })
    }

    /// Panel of response-only series given as rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, PanelError> {
        let series = rows
            .into_iter()
            .enumerate()
            .map(|(i, y)| SeriesRecord::new(format!("s{i}"), y))
            .collect();
        Self::new(series, 0)
    }

    pub fn series(&self) -> &[SeriesRecord] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.series[i].y
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.series.iter().map(|s| s.id.as_str())
    }

    /// Sub-panel holding the given series, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self, PanelError> {
        let series = indices.iter().map(|&i| self.series[i].clone()).collect();
        Self::new(series, self.feature_dim)
    }
}

/// Reads a long-CSV panel from disk.
pub fn load_panel(path: impl AsRef<Path>) -> Result<PanelData, PanelError> {
    read_panel(File::open(path)?)
}

/// Reads a long-CSV panel. Series keep the order of their first row.
pub fn read_panel<R: Read>(reader: R) -> Result<PanelData, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn(name.to_string()))
    };
    let id_col = col("series_id")?;
    let t_col = col("t")?;
    let y_col = col("y")?;
    let x_count = headers
        .iter()
        .filter(|h| h.len() > 1 && h.starts_with('x') && h[1..].parse::<usize>().is_ok())
        .count();
    let x_cols = (0..x_count)
        .map(|j| col(&format!("x{j}")))
        .collect::<Result<Vec<_>, _>>()?;
    let d = x_cols.len();

    let mut order: Vec<String> = Vec::new();
    let mut cells: HashMap<String, HashMap<usize, (f64, Vec<f64>)>> = HashMap::new();
    let mut max_t = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize, name: &str| -> Result<f64, PanelError> {
            numfmt::parse_num(field(c)).ok_or_else(|| PanelError::InvalidValue {
                column: name.to_string(),
                value: field(c).to_string(),
                line,
            })
        };
        let id = field(id_col).to_string();
        let t: usize = field(t_col).parse().map_err(|_| PanelError::InvalidValue {
            column: "t".into(),
            value: field(t_col).to_string(),
            line,
        })?;
        let y = number(y_col, "y")?;
        let x = x_cols
            .iter()
            .enumerate()
            .map(|(j, &c)| number(c, &format!("x{j}")))
            .collect::<Result<Vec<_>, _>>()?;
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(PanelError::NonFiniteValue { series: id, step: t });
        }
        let per_series = cells.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            HashMap::new()
        });
        if per_series.insert(t, (y, x)).is_some() {
            return Err(PanelError::DuplicateCell { series: id, step: t });
        }
        max_t = max_t.max(t);
    }
    if order.is_empty() {
        return Err(PanelError::EmptyPanel);
    }
    let horizon = max_t + 1;
    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut steps = cells.remove(&id).expect("recorded series");
        let mut y = Vec::with_capacity(horizon);
        let mut x = Vec::with_capacity(horizon * d);
        for t in 0..horizon {
            let (yt, xt) = steps
                .remove(&t)
                .ok_or_else(|| PanelError::RaggedSeries { series: id.clone(), step: t })?;
            y.push(yt);
            x.extend(xt);
        }
        series.push(SeriesRecord { id, y, x });
    }
    PanelData::new(series, d)
}

/// Decimal precision used when writing a panel back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Shortest text that parses back to the identical `f64`.
    #[default]
    Shortest,
    Significant(usize),
}

impl Precision {
    fn format(self, v: f64) -> String {
        match self {
            Precision::Shortest => format!("{v}"),
            Precision::Significant(n) => numfmt::format_sig(v, n),
        }
    }
}

pub fn write_panel<W: Write>(panel: &PanelData, writer: W, precision: Precision) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let d = panel.feature_dim();
    let mut header = vec!["series_id".to_string(), "t".into(), "y".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for s in panel.series() {
        for t in 0..panel.horizon() {
            let mut row = vec![s.id.clone(), t.to_string(), precision.format(s.y[t])];
            row.extend(s.x_at(t, d).iter().map(|&v| precision.format(v)));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_panel(panel: &PanelData, path: impl AsRef<Path>, precision: Precision) -> Result<(), PanelError> {
    write_panel(panel, File::create(path)?, precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Seeded uniform permutation of the series.
    Random,
    /// Series in panel order: train block, then calibration, then test.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub mode: SplitMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PanelSplit {
    pub train: PanelData,
    pub cal: PanelData,
    pub test: PanelData,
}

/// Index blocks chosen by `spec` for a panel of `n` series.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 3], PanelError> {
    if spec.n_train == 0 || spec.n_cal == 0 || spec.n_test == 0 {
        return Err(PanelError::EmptyBlock);
    }
    let requested = spec.n_train + spec.n_cal + spec.n_test;
    if requested > n {
        return Err(PanelError::SizesExceedPanel { requested, available: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if spec.mode == SplitMode::Random {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    let train = idx[..spec.n_train].to_vec();
    let cal = idx[spec.n_train..spec.n_train + spec.n_cal].to_vec();
    let test = idx[spec.n_train + spec.n_cal..requested].to_vec();
    Ok([train, cal, test])
}

pub fn split_panel(panel: &PanelData, spec: &SplitSpec) -> Result<PanelSplit, PanelError> {
    let [train, cal, test] = split_indices(panel.len(), spec)?;
    Ok(PanelSplit {
        train: panel.select(&train)?,
        cal: panel.select(&cal)?,
        test: panel.select(&test)?,
    })
}

/// Heuristic findings against the exchangeability assumption.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeabilityWarning {
    InsufficientCrossSection { series: usize },
    MeanDrift { t_statistic: f64 },
    ScaleDrift { t_statistic: f64 },
}

impl fmt::Display for ExchangeabilityWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InsufficientCrossSection { series } => {
                write!(f, "insufficient cross-section ({series} series)")
            }
            Self::MeanDrift { t_statistic } => {
                write!(f, "series means trend with panel order (t = {t_statistic:.2})")
            }
            Self::ScaleDrift { t_statistic } => {
                write!(f, "series spreads trend with panel order (t = {t_statistic:.2})")
            }
        }
    }
}

/// |t| above which a trend of per-series statistics against panel order is
/// reported (two-sided p ≈ 0.001 for large N).
pub const DRIFT_T_THRESHOLD: f64 = 3.3;

/// Exchangeability cannot be tested from one panel; this only flags obvious
/// order effects: per-series means or spreads correlated with series index.
pub fn validate_exchangeability_contract(panel: &PanelData) -> Vec<ExchangeabilityWarning> {
    let n = panel.len();
    if n < 3 {
        return vec![ExchangeabilityWarning::InsufficientCrossSection { series: n }];
    }
    let index: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let means: Vec<f64> = panel
        .series()
        .iter()
        .map(|s| s.y.iter().sum::<f64>() / s.y.len() as f64)
        .collect();
    let spreads: Vec<f64> = panel
        .series()
        .iter()
        .zip(&means)
        .map(|(s, m)| (s.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / s.y.len() as f64).sqrt())
        .collect();
    let mut warnings = Vec::new();
    if let Some(t) = correlation_t(&index, &means).filter(|t| t.abs() > DRIFT_T_THRESHOLD) {
        warnings.push(ExchangeabilityWarning::MeanDrift { t_statistic: t });
    }
    if let Some(t) = correlation_t(&index, &spreads).filter(|t| t.abs() > DRIFT_T_THRESHOLD) {
        warnings.push(ExchangeabilityWarning::ScaleDrift { t_statistic: t });
    }
    warnings
}

/// t statistic of the Pearson correlation; `None` when either side is constant.
fn correlation_t(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= f64::EPSILON * f64::EPSILON * n * mb.abs().max(1.0) {
        return None;
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    let denom = 1.0 - r * r;
    Some(if denom <= 0.0 {
        r.signum() * f64::INFINITY
    } else {
        r * ((n - 2.0) / denom).sqrt()
    })
}

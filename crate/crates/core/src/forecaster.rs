//! Point forecasters producing the `ŷ` grid consumed by calibration.
//!
//! The main model is a bank of per-step ridge regressions: sub-model `t`
//! predicts `y_t` from the series' own responses before `t` and its
//! covariates up to and including `t`. Step 0 has no response history, so
//! with `d = 0` it reduces to the training mean of `y_0`. The intercept is
//! never penalized (features and targets are centered before the solve).
//!
//! The same machinery fit on absolute residuals gives the error predictor
//! behind the LASplit normalizer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt;
use crate::panel::PanelData;

/// Default ridge strength for the per-step regressions.
pub const DEFAULT_RIDGE: f64 = 1e-3;

const MODEL_FORMAT_VERSION: u32 = 1;

/// Smallest squared Cholesky pivot, relative to the largest Gram diagonal,
/// accepted for an unpenalized solve.
const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("normal equations for step {step} are singular (use a positive ridge strength)")]
    SingularDesign { step: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 training series, got {0}")]
    InsufficientSeries(usize),
    #[error("ridge strength must be finite and non-negative, got {0}")]
    InvalidRidge(f64),
    #[error("error floor must be finite and positive, got {0}")]
    InvalidFloor(f64),
    #[error("no prediction for series `{series}` at step {step}")]
    MissingPrediction { series: String, step: usize },
    #[error("prediction file names unknown series `{0}`")]
    UnknownSeries(String),
    #[error("duplicate prediction for series `{series}` at step {step}")]
    DuplicatePrediction { series: String, step: usize },
    #[error("non-finite prediction for series `{series}` at step {step}")]
    NonFiniteValue { series: String, step: usize },
    #[error("cannot parse prediction file: {0}")]
    Parse(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastSource {
    PerStepLinear,
    NaiveLast,
    External,
    ErrorPredictor,
}

/// `N × T` point predictions aligned with a panel's series order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastGrid {
    values: Vec<f64>,
    horizon: usize,
    source: ForecastSource,
}

impl ForecastGrid {
    pub fn from_rows(rows: Vec<Vec<f64>>, source: ForecastSource) -> Result<Self, ForecastError> {
        let horizon = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != horizon) {
            return Err(ForecastError::ShapeMismatch("ragged prediction rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ForecastError::ShapeMismatch("non-finite prediction".into()));
        }
        Ok(Self { values: rows.concat(), horizon, source })
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.horizon).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn source(&self) -> ForecastSource {
        self.source
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.horizon + t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.horizon.max(1))
    }

    /// Errors unless the grid has the panel's `N × T` shape.
    pub fn check_aligned(&self, panel: &PanelData) -> Result<(), ForecastError> {
        if self.len() != panel.len() || self.horizon != panel.horizon() {
            return Err(ForecastError::ShapeMismatch(format!(
                "grid is {}x{}, panel is {}x{}",
                self.len(),
                self.horizon,
                panel.len(),
                panel.horizon()
            )));
        }
        Ok(())
    }
}

/// Which history enters each sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecasterConfig {
    pub ridge: f64,
    /// Use only the most recent `k` lagged responses (and covariate rows
    /// `t-k..=t`); `None` uses the whole history.
    pub lags: Option<usize>,
    pub use_responses: bool,
    pub use_covariates: bool,
    /// Scale centered features to unit variance before the solve.
    pub standardize: bool,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            ridge: DEFAULT_RIDGE,
            lags: None,
            use_responses: true,
            use_covariates: true,
            standardize: false,
        }
    }
}

impl ForecasterConfig {
    pub fn with_ridge(ridge: f64) -> Self {
        Self { ridge, ..Self::default() }
    }

    fn window_start(&self, t: usize) -> usize {
        self.lags.map_or(0, |k| t.saturating_sub(k))
    }

    /// Feature vector of sub-model `t` for one series. Reads responses at
    /// steps `< t` and covariates at steps `<= t` only.
    fn features(&self, y: &[f64], x: &[f64], d: usize, t: usize) -> Vec<f64> {
        let start = self.window_start(t);
        let mut f = Vec::new();
        if self.use_responses {
            f.extend_from_slice(&y[start..t]);
        }
        if self.use_covariates && d > 0 {
            f.extend_from_slice(&x[start * d..(t + 1) * d]);
        }
        f
    }
}

/// One ridge regression `ŷ = intercept + coef · features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl SubModel {
    fn predict(&self, features: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(features).map(|(c, f)| c * f).sum::<f64>()
    }
}

/// `T` per-step ridge regressions, one per target step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStepLinearModel {
    format_version: u32,
    pub config: ForecasterConfig,
    pub horizon: usize,
    pub feature_dim: usize,
    pub steps: Vec<SubModel>,
}

fn fit_ridge(rows: &[Vec<f64>], targets: &[f64], config: &ForecasterConfig, step: usize) -> Result<SubModel, ForecastError> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let nf = n as f64;
    let y_mean = targets.iter().sum::<f64>() / nf;
    if p == 0 {
        return Ok(SubModel { intercept: y_mean, coef: Vec::new() });
    }
    let mut x_mean = vec![0.0; p];
    for r in rows {
        for (m, v) in x_mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    x_mean.iter_mut().for_each(|m| *m /= nf);
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i][j] - x_mean[j]);
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            if !config.standardize {
                return 1.0;
            }
            let sd = (centered.column(j).norm_squared() / nf).sqrt();
            if sd > 0.0 { sd } else { 1.0 }
        })
        .collect();
    let design = DMatrix::from_fn(n, p, |i, j| centered[(i, j)] / scale[j]);
    let yc = DVector::from_iterator(n, targets.iter().map(|t| t - y_mean));
    let mut gram = design.transpose() * &design;
    for j in 0..p {
        gram[(j, j)] += config.ridge;
    }
    let max_diag = (0..p).map(|j| gram[(j, j)]).fold(0.0, f64::max);
    let chol = gram.clone().cholesky().ok_or(ForecastError::SingularDesign { step })?;
    if config.ridge == 0.0 {
        let l = chol.l_dirty();
        let min_pivot = (0..p).map(|j| l[(j, j)] * l[(j, j)]).fold(f64::INFINITY, f64::min);
        if max_diag <= 0.0 || min_pivot <= PIVOT_TOLERANCE * max_diag {
            return Err(ForecastError::SingularDesign { step });
        }
    }
    let beta = chol.solve(&(design.transpose() * yc));
    let coef: Vec<f64> = beta.iter().zip(&scale).map(|(b, s)| b / s).collect();
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(ForecastError::SingularDesign { step });
    }
    let intercept = y_mean - coef.iter().zip(&x_mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(SubModel { intercept, coef })
}

fn check_ridge(ridge: f64) -> Result<(), ForecastError> {
    if !ridge.is_finite() || ridge < 0.0 {
        return Err(ForecastError::InvalidRidge(ridge));
    }
    Ok(())
}

fn fit_steps(
    train: &PanelData,
    config: &ForecasterConfig,
    target: impl Fn(usize, usize) -> f64,
) -> Result<PerStepLinearModel, ForecastError> {
    check_ridge(config.ridge)?;
    if train.len() < 2 {
        return Err(ForecastError::InsufficientSeries(train.len()));
    }
    let d = train.feature_dim();
    let steps = (0..train.horizon())
        .map(|t| {
            let rows: Vec<Vec<f64>> = train
                .series()
                .iter()
                .map(|s| config.features(&s.y, &s.x, d, t))
                .collect();
            let targets: Vec<f64> = (0..train.len()).map(|i| target(i, t)).collect();
            fit_ridge(&rows, &targets, config, t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PerStepLinearModel {
        format_version: MODEL_FORMAT_VERSION,
        config: *config,
        horizon: train.horizon(),
        feature_dim: d,
        steps,
    })
}

/// Fits one ridge regression per step on the proper training set.
pub fn fit_per_step_linear(train: &PanelData, config: &ForecasterConfig) -> Result<PerStepLinearModel, ForecastError> {
    fit_steps(train, config, |i, t| train.y(i)[t])
}

impl PerStepLinearModel {
    fn check_panel(&self, panel: &PanelData) -> Result<(), ForecastError> {
        if panel.horizon() != self.horizon || panel.feature_dim() != self.feature_dim {
            return Err(ForecastError::ShapeMismatch(format!(
                "model expects T={}, d={}; panel has T={}, d={}",
                self.horizon,
                self.feature_dim,
                panel.horizon(),
                panel.feature_dim()
            )));
        }
        Ok(())
    }

    fn predict_rows(&self, panel: &PanelData) -> Result<Vec<Vec<f64>>, ForecastError> {
        self.check_panel(panel)?;
        let d = self.feature_dim;
        Ok(panel
            .series()
            .iter()
            .map(|s| {
                self.steps
                    .iter()
                    .enumerate()
                    .map(|(t, m)| m.predict(&self.config.features(&s.y, &s.x, d, t)))
                    .collect()
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ForecastError> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForecastError> {
        let model: Self = serde_json::from_reader(File::open(path)?)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(ForecastError::UnsupportedVersion(model.format_version));
        }
        Ok(model)
    }
}

/// Anything that fills a prediction grid for a panel without lookahead.
pub trait PointForecaster {
    fn predict_grid(&self, panel: &PanelData) -> Result<ForecastGrid, ForecastError>;
}

impl PointForecaster for PerStepLinearModel {
    fn predict_grid(&self, panel: &PanelData) -> Result<ForecastGrid, ForecastError> {
        let rows = self.predict_rows(panel)?;
        Ok(ForecastGrid { values: rows.concat(), horizon: self.horizon, source: ForecastSource::PerStepLinear })
    }
}

/// Predicts the previous response; 0 at the first step.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveLast;

impl PointForecaster for NaiveLast {
    fn predict_grid(&self, panel: &PanelData) -> Result<ForecastGrid, ForecastError> {
        let mut values = Vec::with_capacity(panel.len() * panel.horizon());
        for s in panel.series() {
            values.push(0.0);
            values.extend_from_slice(&s.y[..s.y.len() - 1]);
        }
        Ok(ForecastGrid { values, horizon: panel.horizon(), source: ForecastSource::NaiveLast })
    }
}

/// Per-step ridge model of `|y - ŷ|`, floored at a positive constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPredictorModel {
    pub model: PerStepLinearModel,
    pub floor: f64,
}

/// `1e-6 × (1 + mean |y|)` over the training responses.
pub fn default_error_floor(train: &PanelData) -> f64 {
    let n = (train.len() * train.horizon()) as f64;
    let mean_abs = train.series().iter().flat_map(|s| &s.y).map(|v| v.abs()).sum::<f64>() / n;
    1e-6 * (1.0 + mean_abs)
}

/// Fits the error predictor on the proper training set's absolute residuals.
/// `floor = None` uses [`default_error_floor`].
pub fn fit_error_predictor(
    train: &PanelData,
    grid: &ForecastGrid,
    config: &ForecasterConfig,
    floor: Option<f64>,
) -> Result<ErrorPredictorModel, ForecastError> {
    grid.check_aligned(train)?;
    let floor = floor.unwrap_or_else(|| default_error_floor(train));
    if !floor.is_finite() || floor <= 0.0 {
        return Err(ForecastError::InvalidFloor(floor));
    }
    let model = fit_steps(train, config, |i, t| (train.y(i)[t] - grid.get(i, t)).abs())?;
    Ok(ErrorPredictorModel { model, floor })
}

impl ErrorPredictorModel {
    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    /// Floored predictions of `|r_{i,t}|` for every series and step.
    pub fn predict_grid(&self, panel: &PanelData) -> Result<ForecastGrid, ForecastError> {
        let values = self
            .model
            .predict_rows(panel)?
            .concat()
            .into_iter()
            .map(|v| v.max(self.floor))
            .collect();
        Ok(ForecastGrid { values, horizon: self.model.horizon, source: ForecastSource::ErrorPredictor })
    }
}

/// Reads a `series_id,t,y_hat` CSV and aligns it with `panel`.
pub fn ingest_external_grid(path: impl AsRef<Path>, panel: &PanelData) -> Result<ForecastGrid, ForecastError> {
    read_external_grid(File::open(path)?, panel)
}

pub fn read_external_grid<R: Read>(reader: R, panel: &PanelData) -> Result<ForecastGrid, ForecastError> {
    let horizon = panel.horizon();
    let index: HashMap<&str, usize> = panel.ids().enumerate().map(|(i, id)| (id, i)).collect();
    let mut values = vec![f64::NAN; panel.len() * horizon];
    let mut filled = vec![false; values.len()];
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ForecastError::Parse(format!("missing column `{name}`")))
    };
    let (id_col, t_col, v_col) = (col("series_id")?, col("t")?, col("y_hat")?);
    for record in rdr.records() {
        let record = record?;
        let id = record.get(id_col).unwrap_or("");
        let &i = index.get(id).ok_or_else(|| ForecastError::UnknownSeries(id.to_string()))?;
        let raw_t = record.get(t_col).unwrap_or("");
        let t: usize = raw_t.parse().map_err(|_| ForecastError::Parse(format!("bad step `{raw_t}`")))?;
        if t >= horizon {
            return Err(ForecastError::ShapeMismatch(format!("step {t} beyond horizon {horizon}")));
        }
        let raw_v = record.get(v_col).unwrap_or("");
        let v = numfmt::parse_num(raw_v).ok_or_else(|| ForecastError::Parse(format!("bad y_hat `{raw_v}`")))?;
        if !v.is_finite() {
            return Err(ForecastError::NonFiniteValue { series: id.to_string(), step: t });
        }
        let k = i * horizon + t;
        if std::mem::replace(&mut filled[k], true) {
            return Err(ForecastError::DuplicatePrediction { series: id.to_string(), step: t });
        }
        values[k] = v;
    }
    if let Some(k) = filled.iter().position(|f| !f) {
        return Err(ForecastError::MissingPrediction {
            series: panel.series()[k / horizon].id.clone(),
            step: k % horizon,
        });
    }
    Ok(ForecastGrid { values, horizon, source: ForecastSource::External })
}

/// Writes a grid as `series_id,t,y_hat` with shortest round-trip decimals.
pub fn write_grid<W: Write>(grid: &ForecastGrid, panel: &PanelData, writer: W) -> Result<(), ForecastError> {
    grid.check_aligned(panel)?;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["series_id", "t", "y_hat"])?;
    for (id, row) in panel.ids().zip(grid.rows()) {
        for (t, v) in row.iter().enumerate() {
            wtr.write_record([id.to_string(), t.to_string(), format!("{v}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::SeriesRecord;

    fn doubling_panel() -> PanelData {
        PanelData::from_rows(vec![
            vec![1.0, 2.0, 4.0],
            vec![3.0, 6.0, 12.0],
            vec![-2.0, -4.0, -8.0],
            vec![0.5, 1.0, 2.0],
        ])
        .unwrap()
    }

    fn one_lag_exact() -> ForecasterConfig {
        ForecasterConfig { ridge: 0.0, lags: Some(1), ..ForecasterConfig::default() }
    }

    #[test]
    fn recovers_exact_recurrence() {
        let model = fit_per_step_linear(&doubling_panel(), &one_lag_exact()).unwrap();
        assert_eq!(model.steps.len(), 3);
        for m in &model.steps[1..] {
            assert_eq!(m.coef.len(), 1);
            assert!((m.coef[0] - 2.0).abs() < 1e-9, "{m:?}");
            assert!(m.intercept.abs() < 1e-9);
        }
        let fresh = PanelData::from_rows(vec![vec![1.0, 2.0, 4.0]]).unwrap();
        let grid = model.predict_grid(&fresh).unwrap();
        assert!((grid.get(0, 1) - 2.0).abs() < 1e-9);
        assert!((grid.get(0, 2) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn constant_panel_predicts_constant() {
        let panel = PanelData::from_rows(vec![vec![3.5; 4]; 5]).unwrap();
        let model = fit_per_step_linear(&panel, &ForecasterConfig::default()).unwrap();
        let grid = model.predict_grid(&panel).unwrap();
        assert!(grid.rows().flatten().all(|v| (v - 3.5).abs() < 1e-9));
    }

    #[test]
    fn identical_series_are_singular_without_ridge() {
        let panel = PanelData::from_rows(vec![vec![1.0, 2.0, 5.0, 3.0]; 2]).unwrap();
        let cfg = ForecasterConfig::with_ridge(0.0);
        assert!(matches!(fit_per_step_linear(&panel, &cfg), Err(ForecastError::SingularDesign { step: 1 })));
        assert!(fit_per_step_linear(&panel, &ForecasterConfig::default()).is_ok());
    }

    #[test]
    fn full_history_recurrence_is_rank_deficient() {
        let cfg = ForecasterConfig::with_ridge(0.0);
        assert!(matches!(
            fit_per_step_linear(&doubling_panel(), &cfg),
            Err(ForecastError::SingularDesign { step: 2 })
        ));
    }

    #[test]
    fn naive_last_shifts_responses() {
        let panel = PanelData::from_rows(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let grid = NaiveLast.predict_grid(&panel).unwrap();
        assert_eq!(grid.row(0), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_on_horizon() {
        let model = fit_per_step_linear(&doubling_panel(), &one_lag_exact()).unwrap();
        let other = PanelData::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(model.predict_grid(&other), Err(ForecastError::ShapeMismatch(_))));
    }

    #[test]
    fn strong_ridge_shrinks_to_step_means() {
        let panel = PanelData::from_rows(vec![
            vec![1.0, 3.0, 2.0],
            vec![2.0, 1.0, 7.0],
            vec![4.0, 0.0, 1.0],
        ])
        .unwrap();
        let model = fit_per_step_linear(&panel, &ForecasterConfig::with_ridge(1e12)).unwrap();
        let grid = model.predict_grid(&panel).unwrap();
        let means = [7.0 / 3.0, 4.0 / 3.0, 10.0 / 3.0];
        for row in grid.rows() {
            for (v, m) in row.iter().zip(means) {
                assert!((v - m).abs() < 1e-6, "{v} vs {m}");
            }
        }
    }

    #[test]
    fn covariates_enter_step_zero() {
        let series = (0..4)
            .map(|i| {
                let x: Vec<f64> = (0..2).map(|t| (i + t) as f64).collect();
                let y = x.iter().map(|v| 3.0 * v + 1.0).collect();
                SeriesRecord::with_covariates(format!("s{i}"), y, x)
            })
            .collect();
        let panel = PanelData::new(series, 1).unwrap();
        let cfg = ForecasterConfig { ridge: 0.0, use_responses: false, lags: Some(0), ..Default::default() };
        let model = fit_per_step_linear(&panel, &cfg).unwrap();
        assert!((model.steps[0].coef[0] - 3.0).abs() < 1e-9);
        let grid = model.predict_grid(&panel).unwrap();
        for (i, s) in panel.series().iter().enumerate() {
            for t in 0..2 {
                assert!((grid.get(i, t) - s.y[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_lookahead_under_mutation() {
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..5).map(|t| ((i * 7 + t * 3) % 5) as f64 + 0.1 * i as f64).collect())
            .collect();
        let train = PanelData::from_rows(rows.clone()).unwrap();
        let model = fit_per_step_linear(&train, &ForecasterConfig::default()).unwrap();
        let base = model.predict_grid(&train).unwrap();
        for t in 0..5 {
            let mut mutated = rows.clone();
            for row in &mut mutated {
                for v in &mut row[t..] {
                    *v += 100.0;
                }
            }
            let grid = model.predict_grid(&PanelData::from_rows(mutated).unwrap()).unwrap();
            for i in 0..6 {
                for s in 0..=t {
                    assert_eq!(grid.get(i, s), base.get(i, s), "series {i} step {s} after mutating >= {t}");
                }
            }
        }
    }

    #[test]
    fn fit_is_invariant_to_series_order() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| (0..4).map(|t| ((i * i + 3 * t) % 11) as f64).collect()).collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let a = fit_per_step_linear(&PanelData::from_rows(rows).unwrap(), &ForecasterConfig::default()).unwrap();
        let b = fit_per_step_linear(&PanelData::from_rows(reversed).unwrap(), &ForecasterConfig::default()).unwrap();
        for (ma, mb) in a.steps.iter().zip(&b.steps) {
            assert!((ma.intercept - mb.intercept).abs() < 1e-9);
            for (ca, cb) in ma.coef.iter().zip(&mb.coef) {
                assert!((ca - cb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn error_predictor_fits_constant_residuals() {
        let panel = PanelData::from_rows(vec![vec![4.0, 5.0, 6.0], vec![0.0, -1.0, 3.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let shifted: Vec<Vec<f64>> = panel.series().iter().map(|s| s.y.iter().map(|v| v - 3.0).collect()).collect();
        let grid = ForecastGrid::from_rows(shifted, ForecastSource::External).unwrap();
        let err = fit_error_predictor(&panel, &grid, &ForecasterConfig::default(), None).unwrap();
        let out = err.predict_grid(&panel).unwrap();
        assert!(out.rows().flatten().all(|v| (v - 3.0).abs() < 1e-9));

        let exact = ForecastGrid::from_rows(panel.series().iter().map(|s| s.y.clone()).collect(), ForecastSource::External).unwrap();
        let err = fit_error_predictor(&panel, &exact, &ForecasterConfig::default(), Some(1e-3)).unwrap();
        assert!(err.predict_grid(&panel).unwrap().rows().flatten().all(|&v| v == 1e-3));
    }

    #[test]
    fn error_predictor_singular_without_ridge() {
        let panel = PanelData::from_rows(vec![vec![1.0, 2.0, 3.0]; 2]).unwrap();
        let grid = NaiveLast.predict_grid(&panel).unwrap();
        let cfg = ForecasterConfig::with_ridge(0.0);
        assert!(matches!(
            fit_error_predictor(&panel, &grid, &cfg, Some(1e-3)),
            Err(ForecastError::SingularDesign { .. })
        ));
    }

    fn ab_panel() -> PanelData {
        PanelData::from_rows(vec![vec![0.0; 6], vec![1.0; 6]]).unwrap()
    }

    fn grid_csv(skip: Option<(usize, usize)>, extra: bool) -> String {
        let mut s = String::from("series_id,t,y_hat\n");
        for i in 0..2 {
            for t in 0..6 {
                if skip == Some((i, t)) {
                    continue;
                }
                s.push_str(&format!("s{i},{t},{}\n", i as f64 + 0.25 * t as f64));
            }
        }
        if extra {
            s.push_str("z,0,1\n");
        }
        s
    }

    #[test]
    fn ingests_complete_grid() {
        let grid = read_external_grid(grid_csv(None, false).as_bytes(), &ab_panel()).unwrap();
        assert_eq!(grid.source(), ForecastSource::External);
        assert_eq!(grid.get(1, 5), 2.25);
        let mut out = Vec::new();
        write_grid(&grid, &ab_panel(), &mut out).unwrap();
        assert_eq!(read_external_grid(out.as_slice(), &ab_panel()).unwrap(), grid);
    }

    #[test]
    fn ingest_errors() {
        assert!(matches!(
            read_external_grid(grid_csv(Some((0, 5)), false).as_bytes(), &ab_panel()),
            Err(ForecastError::MissingPrediction { step: 5, .. })
        ));
        assert!(matches!(
            read_external_grid(grid_csv(None, true).as_bytes(), &ab_panel()),
            Err(ForecastError::UnknownSeries(s)) if s == "z"
        ));
        assert!(matches!(
            read_external_grid("series_id,t,y_hat\ns0,0,inf\n".as_bytes(), &ab_panel()),
            Err(ForecastError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let model = fit_per_step_linear(&doubling_panel(), &ForecasterConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(PerStepLinearModel::load(&path).unwrap(), model);
    }
}

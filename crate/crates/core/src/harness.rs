//! Synthetic panels and Monte-Carlo experiments.
//!
//! Every replicate draws its own panel from a ChaCha stream selected by the
//! replicate index, splits it, fits the per-step ridge forecaster, calibrates
//! each requested method and scores it on the test block. Replicates run in
//! parallel and are merged by index, so results do not depend on the
//! thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{calibrate_path, CalibrationConfig, CalibrationData, ConformalError, ErrorScales, IntervalSet, Method};
use crate::forecaster::{fit_error_predictor, fit_per_step_linear, ForecastError, ForecasterConfig, PointForecaster, DEFAULT_RIDGE};
use crate::metrics::{self, EvalWindow, ExperimentReport, MetricsError, ReportMeta, SummaryRow};
use crate::numfmt::csv_num;
use crate::panel::{split_panel, PanelData, PanelError, SeriesRecord, SplitMode, SplitSpec};

/// Percentiles of the per-series coverage distribution emitted in curves.
pub const CURVE_PERCENTILES: [u32; 20] = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70, 75, 80, 85, 90, 95, 100];
/// Label of the temporally independent reference in curve files.
pub const IDEAL: &str = "ideal";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseKind {
    IidGauss,
    /// Stationary AR(1) with unit marginal variance.
    Ar1 { phi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScaleDist {
    Constant,
    /// `σ_i = exp(sigma · z)`, `z` standard normal.
    Lognormal { sigma: f64 },
}

/// Recipe for `y_{i,t} = level_i + drift · i + σ_i · ε_{i,t}`, with
/// `level_i ~ N(0, level_sd²)` and `i` the position in the panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_cal: usize,
    pub m_test: usize,
    pub horizon: usize,
    pub noise: NoiseKind,
    pub scale: ScaleDist,
    pub drift: f64,
    pub level_sd: f64,
    pub split: SplitMode,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_cal: 99,
            m_test: 200,
            horizon: 20,
            noise: NoiseKind::IidGauss,
            scale: ScaleDist::Constant,
            drift: 0.0,
            level_sd: 1.0,
            split: SplitMode::Random,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_series(&self) -> usize {
        self.n_train + self.n_cal + self.m_test
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.n_train == 0 || self.n_cal == 0 || self.m_test == 0 || self.horizon == 0 {
            return bad("block sizes and horizon must be positive");
        }
        if let NoiseKind::Ar1 { phi } = self.noise {
            if !(phi > -1.0 && phi < 1.0) {
                return bad("AR coefficient must lie in (-1, 1)");
            }
        }
        if let ScaleDist::Lognormal { sigma } = self.scale {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return bad("lognormal sigma must be finite and non-negative");
            }
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite");
        }
        if !(self.level_sd.is_finite() && self.level_sd >= 0.0) {
            return bad("level_sd must be finite and non-negative");
        }
        Ok(())
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec { n_train: self.n_train, n_cal: self.n_cal, n_test: self.m_test, mode: self.split, seed }
    }
}

/// Stream `replicate` of the master seed.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Panel for replicate 0 of `spec.seed`.
pub fn generate_panel(spec: &SynthSpec) -> Result<PanelData, HarnessError> {
    generate_panel_with(spec, &mut replicate_rng(spec.seed, 0))
}

pub fn generate_panel_with<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<PanelData, HarnessError> {
    spec.validate()?;
    let width = spec.n_series().to_string().len();
    let series = (0..spec.n_series())
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            let sigma = match spec.scale {
                ScaleDist::Constant => 1.0,
                ScaleDist::Lognormal { sigma } => (sigma * z).exp(),
            };
            let level = spec.level_sd * rng.sample::<f64, _>(StandardNormal) + spec.drift * i as f64;
            let mut e = 0.0;
            let y = (0..spec.horizon)
                .map(|t| {
                    let z: f64 = rng.sample(StandardNormal);
                    e = match spec.noise {
                        NoiseKind::IidGauss => z,
                        NoiseKind::Ar1 { phi } if t > 0 => phi * e + (1.0 - phi * phi).sqrt() * z,
                        NoiseKind::Ar1 { .. } => z,
                    };
                    level + sigma * e
                })
                .collect();
            SeriesRecord::new(format!("s{i:0width$}"), y)
        })
        .collect();
    Ok(PanelData::new(series, 0)?)
}

/// Everything a Monte-Carlo run needs besides the seed inside `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub synth: SynthSpec,
    pub methods: Vec<Method>,
    pub calibration: CalibrationConfig,
    pub replicates: usize,
    pub window: EvalWindow,
    pub ridge: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            methods: Method::ALL.to_vec(),
            calibration: CalibrationConfig::default(),
            replicates: 200,
            window: EvalWindow::default(),
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl McConfig {
    fn validate(&self) -> Result<(), HarnessError> {
        self.synth.validate()?;
        self.calibration.validate()?;
        if self.replicates == 0 {
            return Err(HarnessError::InvalidSpec("at least one replicate is required".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::InvalidSpec("no methods requested".into()));
        }
        self.window.range(self.synth.horizon)?;
        Ok(())
    }
}

/// Coverage of one method at one step, over test series and replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCoverage {
    pub method: String,
    pub step: usize,
    pub coverage: f64,
    /// Standard error of the replicate means.
    pub se_replicate: f64,
    /// `√(p(1-p)/(R·M))`.
    pub se_binomial: f64,
}

/// Bottom-`percentile`% coverage over the window steps up to `step`, after
/// rescaling to the split-conformal mean width. Averaged over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub method: String,
    pub percentile: u32,
    pub coverage: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub config: McConfig,
    pub reports: Vec<ExperimentReport>,
    pub summary: Vec<SummaryRow>,
    pub step_coverage: Vec<StepCoverage>,
    pub curves: Vec<CurvePoint>,
}

impl McResult {
    pub fn summary_row(&self, method: Method, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn step_row(&self, method: &str, step: usize) -> Option<&StepCoverage> {
        self.step_coverage.iter().find(|r| r.method == method && r.step == step)
    }

    pub fn curve(&self, method: &str, percentile: u32) -> Vec<&CurvePoint> {
        self.curves.iter().filter(|c| c.method == method && c.percentile == percentile).collect()
    }
}

struct Replicate {
    report: ExperimentReport,
    /// Per labelled method: covered fraction of test series at each step.
    steps: Vec<(String, Vec<f64>)>,
    /// Per labelled method: `[window step][percentile]`.
    curves: Vec<(String, Vec<Vec<f64>>)>,
}

fn covered(set: &IntervalSet, truths: &PanelData) -> Vec<Vec<bool>> {
    set.intervals
        .iter()
        .zip(truths.series())
        .map(|(row, s)| row.iter().zip(&s.y).map(|(iv, &y)| iv.contains(y)).collect())
        .collect()
}

fn step_fractions(hits: &[Vec<bool>], horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|t| hits.iter().filter(|row| row[t]).count() as f64 / hits.len() as f64)
        .collect()
}

fn percentile_curves(hits: &[Vec<bool>], window: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    let mut counts = vec![0usize; hits.len()];
    window
        .clone()
        .map(|t| {
            for (c, row) in counts.iter_mut().zip(hits) {
                *c += usize::from(row[t]);
            }
            let len = (t + 1 - window.start) as f64;
            let cbar: Vec<f64> = counts.iter().map(|&c| c as f64 / len).collect();
            CURVE_PERCENTILES
                .iter()
                .map(|&p| metrics::bottom_fraction_mean(&cbar, f64::from(p) / 100.0).expect("non-empty test block"))
                .collect()
        })
        .collect()
}

fn run_replicate(config: &McConfig, index: usize) -> Result<Replicate, HarnessError> {
    let mut rng = replicate_rng(config.synth.seed, index as u64);
    let panel = generate_panel_with(&config.synth, &mut rng)?;
    let split = split_panel(&panel, &config.synth.split_spec(rng.next_u64()))?;
    let fcfg = ForecasterConfig::with_ridge(config.ridge);
    let model = fit_per_step_linear(&split.train, &fcfg)?;
    let cal_grid = model.predict_grid(&split.cal)?;
    let test_grid = model.predict_grid(&split.test)?;
    let error_scales = if config.methods.contains(&Method::LaSplit) {
        let train_grid = model.predict_grid(&split.train)?;
        let ep = fit_error_predictor(&split.train, &train_grid, &fcfg, None)?;
        Some(ErrorScales::predict(&ep, &split.cal, &split.test)?)
    } else {
        None
    };
    let data = CalibrationData {
        cal: &split.cal,
        cal_grid: &cal_grid,
        test: &split.test,
        test_grid: &test_grid,
        error_scales: error_scales.as_ref(),
    };
    let sets = config
        .methods
        .iter()
        .map(|&m| calibrate_path(&data, m, &config.calibration))
        .collect::<Result<Vec<_>, _>>()?;
    let horizon = config.synth.horizon;
    let meta = ReportMeta {
        seed: config.synth.seed,
        n_cal: split.cal.len(),
        n_test: split.test.len(),
        horizon,
        alpha: config.calibration.alpha,
    };
    let report = metrics::evaluate(&sets, &split.test, config.window, meta)?;
    let window = config.window.range(horizon)?;

    let reference = sets.iter().find(|s| s.method == Method::Split);
    let mut steps = Vec::new();
    let mut curves = Vec::new();
    for set in &sets {
        steps.push((set.method.to_string(), step_fractions(&covered(set, &split.test), horizon)));
        if let Some(Ok((rescaled, _))) = reference.map(|r| metrics::rescale_to_reference(set, r, config.window)) {
            curves.push((set.method.to_string(), percentile_curves(&covered(&rescaled, &split.test), window.clone())));
        }
    }
    let p = 1.0 - config.calibration.alpha;
    let ideal: Vec<Vec<bool>> = (0..split.test.len()).map(|_| (0..horizon).map(|_| rng.random_bool(p)).collect()).collect();
    steps.push((IDEAL.to_string(), step_fractions(&ideal, horizon)));
    curves.push((IDEAL.to_string(), percentile_curves(&ideal, window)));
    Ok(Replicate { report, steps, curves })
}

/// Runs every replicate and aggregates.
pub fn run_mc(config: &McConfig) -> Result<McResult, HarnessError> {
    config.validate()?;
    let reps = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            log::debug!("replicate {r}");
            run_replicate(config, r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_test = config.synth.m_test as f64;
    let r_count = reps.len() as f64;

    let mut step_coverage = Vec::new();
    for (k, (label, _)) in reps[0].steps.iter().enumerate() {
        for t in 0..config.synth.horizon {
            let values: Vec<f64> = reps.iter().map(|r| r.steps[k].1[t]).collect();
            let (mean, sd) = metrics::mean_sd(&values);
            step_coverage.push(StepCoverage {
                method: label.clone(),
                step: t,
                coverage: mean,
                se_replicate: sd / r_count.sqrt(),
                se_binomial: (mean * (1.0 - mean) / (r_count * n_test)).sqrt(),
            });
        }
    }

    let window = config.window.range(config.synth.horizon)?;
    let mut labels: Vec<&str> = Vec::new();
    for r in &reps {
        for (label, _) in &r.curves {
            if !labels.contains(&label.as_str()) {
                labels.push(label);
            }
        }
    }
    let mut curves = Vec::new();
    for label in labels {
        let per_rep: Vec<&Vec<Vec<f64>>> = reps
            .iter()
            .filter_map(|r| r.curves.iter().find(|(l, _)| l == label).map(|(_, c)| c))
            .collect();
        for (w, t) in window.clone().enumerate() {
            for (j, &percentile) in CURVE_PERCENTILES.iter().enumerate() {
                let values: Vec<f64> = per_rep.iter().map(|c| c[w][j]).collect();
                let (coverage, sd) = metrics::mean_sd(&values);
                curves.push(CurvePoint { step: t, method: label.to_string(), percentile, coverage, sd });
            }
        }
    }

    let reports: Vec<ExperimentReport> = reps.into_iter().map(|r| r.report).collect();
    Ok(McResult {
        config: config.clone(),
        summary: metrics::summarize(&reports),
        reports,
        step_coverage,
        curves,
    })
}

/// Coverage check on exchangeable panels.
pub fn run_validity_mc(config: &McConfig) -> Result<McResult, HarnessError> {
    run_mc(config)
}

/// Tail comparison after width rescaling; split conformal is added as the
/// reference when missing.
pub fn run_tail_comparison(config: &McConfig) -> Result<McResult, HarnessError> {
    let mut config = config.clone();
    if !config.methods.contains(&Method::Split) {
        config.methods.insert(0, Method::Split);
    }
    run_mc(&config)
}

fn create(path: &Path) -> Result<fs::File, HarnessError> {
    Ok(fs::File::create(path)?)
}

pub fn write_replicates_csv<W: Write>(reports: &[ExperimentReport], writer: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["replicate", "method", "metric", "value"])?;
    for (r, report) in reports.iter().enumerate() {
        for m in &report.methods {
            for (name, value) in m.scalars() {
                wtr.write_record([&r.to_string(), m.method.as_str(), name, &csv_num(value)])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_step_coverage_csv<W: Write>(rows: &[StepCoverage], writer: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["step", "method", "coverage", "se_replicate", "se_binomial"])?;
    for r in rows {
        wtr.write_record([&r.step.to_string(), &r.method, &csv_num(r.coverage), &csv_num(r.se_replicate), &csv_num(r.se_binomial)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(rows: &[CurvePoint], writer: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["step", "method", "percentile", "coverage", "sd"])?;
    for r in rows {
        wtr.write_record([&r.step.to_string(), &r.method, &r.percentile.to_string(), &csv_num(r.coverage), &csv_num(r.sd)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the result files into `dir` and returns their paths in a fixed
/// order.
pub fn write_results(result: &McResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let paths: Vec<PathBuf> = ["summary.csv", "summary.txt", "replicates.csv", "coverage_by_step.csv", "curves.csv"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    metrics::write_summary_csv(&result.summary, create(&paths[0])?)?;
    fs::write(&paths[1], metrics::summary_table(&result.summary))?;
    write_replicates_csv(&result.reports, create(&paths[2])?)?;
    write_step_coverage_csv(&result.step_coverage, create(&paths[3])?)?;
    write_curves_csv(&result.curves, create(&paths[4])?)?;
    Ok(paths)
}

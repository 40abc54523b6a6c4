//! The `cptd` executable: `calibrate`, `evaluate` and `simulate`.
//!
//! Settings come from a flat TOML file (`--config`) overlaid by flags.
//! Every run writes a `manifest.json` next to its outputs with the resolved
//! configuration and SHA-256 checksums of the artifacts. No timestamps or
//! absolute paths are recorded, so identical inputs give identical trees.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conformal::{calibrate_path, write_intervals, CalibrationConfig, CalibrationData, ConformalError, ErrorScales, IntervalSet, Method};
use crate::forecaster::{
    fit_error_predictor, fit_per_step_linear, ingest_external_grid, ForecastError, ForecastGrid, ForecasterConfig, PointForecaster,
    DEFAULT_RIDGE,
};
use crate::harness::{self, HarnessError, McConfig, NoiseKind, ScaleDist, SynthSpec};
use crate::metrics::{self, EvalWindow, ExperimentReport, MetricsError, ReportMeta};
use crate::panel::{load_panel, split_indices, validate_exchangeability_contract, PanelData, PanelError, SplitMode};

/// Replicates of `evaluate` when not configured.
pub const DEFAULT_EVAL_REPLICATES: usize = 20;
/// Replicates of `simulate` when not configured.
pub const DEFAULT_SIM_REPLICATES: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "cptd", version, about = "Conformal prediction intervals for time-series panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Calibrate,
    Evaluate,
    Simulate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit or ingest forecasts and write prediction intervals.
    Calibrate(Settings),
    /// Calibrate over repeated splits and report coverage and width.
    Evaluate(Settings),
    /// Monte-Carlo experiment on synthetic panels.
    Simulate(Settings),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Calibrate(_) => CommandKind::Calibrate,
            Command::Evaluate(_) => CommandKind::Evaluate,
            Command::Simulate(_) => CommandKind::Simulate,
        }
    }

    pub fn settings(&self) -> &Settings {
        match self {
            Command::Calibrate(s) | Command::Evaluate(s) | Command::Simulate(s) => s,
        }
    }
}

/// Keys accepted in the config file and as flags; flags win.
#[derive(Debug, Clone, Default, clap::Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Flat TOML file with any of the keys below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Long-CSV panel.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Point forecasts for every panel cell (`series_id,t,y_hat`).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Draw the panel from the synthetic generator instead of a file.
    #[arg(long)]
    #[serde(default)]
    pub synthetic: bool,
    /// Method to calibrate; repeat for several.
    #[arg(long = "method")]
    #[serde(default, alias = "methods")]
    pub method: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `full` or `last:K`.
    #[arg(long)]
    pub eval_window: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_cal: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// `random` or `temporal`.
    #[arg(long)]
    pub split_mode: Option<String>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub prior_weight: Option<f64>,
    #[arg(long)]
    pub mad_decay: Option<f64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// `iid_gauss` or `ar1`.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub ar_coef: Option<f64>,
    /// `constant` or `lognormal`.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub level_sd: Option<f64>,
}

impl Settings {
    /// `self` (flags) over `file`.
    pub fn overlay(self, file: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: self.$f.or(file.$f),)* config: self.config, synthetic: self.synthetic || file.synthetic,
                method: if self.method.is_empty() { file.method } else { self.method } } };
        }
        pick!(panel, predictions, alpha, eval_window, seed, output, threads, replicates, n_train, n_cal, n_test, split_mode, ridge,
            prior_weight, mad_decay, horizon, noise, ar_coef, scale, sigma_scale, drift, level_sd)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("IoError: {0}")]
    Io(String),
    #[error("DataError: {0}")]
    Data(String),
    #[error("MathError: {0}")]
    Math(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
            CliError::Math(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::Io(e) => CliError::Io(e.to_string()),
            PanelError::SizesExceedPanel { .. } | PanelError::EmptyBlock => CliError::Config(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ForecastError> for CliError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Io(e) => CliError::Io(e.to_string()),
            ForecastError::SingularDesign { .. } => CliError::Math(e.to_string()),
            ForecastError::InvalidRidge(_) | ForecastError::InvalidFloor(_) => CliError::Config(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConformalError> for CliError {
    fn from(e: ConformalError) -> Self {
        match e {
            ConformalError::InvalidAlpha(_) | ConformalError::InvalidConfig(_) => CliError::Config(e.to_string()),
            ConformalError::ShapeMismatch(_) | ConformalError::NonFiniteScore => CliError::Data(e.to_string()),
            e => CliError::Math(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::WindowOutOfRange { .. } => CliError::Config(e.to_string()),
            MetricsError::Misaligned(_) | MetricsError::EmptyTestSet => CliError::Data(e.to_string()),
            e => CliError::Math(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidSpec(m) => CliError::Config(m),
            HarnessError::Panel(e) => e.into(),
            HarnessError::Forecast(e) => e.into(),
            HarnessError::Conformal(e) => e.into(),
            HarnessError::Metrics(e) => e.into(),
            HarnessError::Io(e) => e.into(),
            HarnessError::Csv(e) => CliError::Io(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Panel { path: PathBuf, predictions: Option<PathBuf> },
    Synthetic(SynthSpec),
}

/// Fully resolved and validated run settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub source: DataSource,
    pub methods: Vec<Method>,
    pub calibration: CalibrationConfig,
    pub eval_window: EvalWindow,
    pub n_train: usize,
    pub n_cal: usize,
    /// `None` takes every series left after training and calibration.
    pub n_test: Option<usize>,
    pub split_mode: SplitMode,
    pub ridge: f64,
    pub seed: u64,
    pub replicates: usize,
    #[serde(skip)]
    pub output: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn parse_split_mode(s: &str) -> Result<SplitMode, CliError> {
    match s {
        "random" => Ok(SplitMode::Random),
        "temporal" => Ok(SplitMode::Temporal),
        _ => Err(CliError::Config(format!("unknown split mode `{s}` (expected random or temporal)"))),
    }
}

impl RunConfig {
    /// Resolves flags over the config file and checks invariants.
    pub fn resolve(command: CommandKind, flags: Settings) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                toml::from_str::<Settings>(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?
            }
            None => Settings::default(),
        };
        Self::from_settings(command, flags.overlay(file))
    }

    pub fn from_settings(command: CommandKind, s: Settings) -> Result<Self, CliError> {
        let cfg_err = |m: String| CliError::Config(m);
        let synthetic = s.synthetic || command == CommandKind::Simulate;
        if synthetic && s.panel.is_some() {
            return Err(cfg_err("give either a panel or the synthetic generator, not both".into()));
        }
        if !synthetic && s.panel.is_none() {
            return Err(cfg_err("no data source: pass --panel or --synthetic".into()));
        }
        if synthetic && s.predictions.is_some() {
            return Err(cfg_err("--predictions needs --panel".into()));
        }
        let methods = if s.method.is_empty() {
            Method::ALL.to_vec()
        } else {
            let mut out = Vec::new();
            for m in &s.method {
                let m: Method = m.parse().map_err(cfg_err)?;
                if !out.contains(&m) {
                    out.push(m);
                }
            }
            out
        };
        let defaults = CalibrationConfig::default();
        let calibration = CalibrationConfig {
            alpha: s.alpha.unwrap_or(defaults.alpha),
            prior_weight: s.prior_weight.unwrap_or(defaults.prior_weight),
            mad_decay: s.mad_decay.or(defaults.mad_decay),
            ..defaults
        };
        calibration.validate().map_err(|e| cfg_err(e.to_string()))?;
        let eval_window = match &s.eval_window {
            Some(w) => w.parse().map_err(cfg_err)?,
            None => EvalWindow::default(),
        };
        let split_mode = s.split_mode.as_deref().map(parse_split_mode).transpose()?.unwrap_or(SplitMode::Random);
        let ridge = s.ridge.unwrap_or(DEFAULT_RIDGE);
        if !(ridge.is_finite() && ridge >= 0.0) {
            return Err(cfg_err(format!("ridge must be a non-negative number, got {ridge}")));
        }
        let seed = s.seed.unwrap_or(0);
        let replicates = s.replicates.unwrap_or(match command {
            CommandKind::Calibrate => 1,
            CommandKind::Evaluate => DEFAULT_EVAL_REPLICATES,
            CommandKind::Simulate => DEFAULT_SIM_REPLICATES,
        });
        if replicates == 0 {
            return Err(cfg_err("replicates must be positive".into()));
        }
        if s.threads == Some(0) {
            return Err(cfg_err("threads must be positive".into()));
        }

        let synth_keys = [s.horizon.is_some(), s.noise.is_some(), s.ar_coef.is_some(), s.scale.is_some(), s.sigma_scale.is_some()];
        let (source, n_train, n_cal, n_test) = if synthetic {
            let base = SynthSpec::default();
            let noise = match s.noise.as_deref().unwrap_or("iid_gauss") {
                "iid_gauss" => NoiseKind::IidGauss,
                "ar1" => NoiseKind::Ar1 { phi: s.ar_coef.unwrap_or(0.5) },
                other => return Err(cfg_err(format!("unknown noise `{other}` (expected iid_gauss or ar1)"))),
            };
            let scale = match s.scale.as_deref().unwrap_or("constant") {
                "constant" => ScaleDist::Constant,
                "lognormal" => ScaleDist::Lognormal { sigma: s.sigma_scale.unwrap_or(1.0) },
                other => return Err(cfg_err(format!("unknown scale `{other}` (expected constant or lognormal)"))),
            };
            let spec = SynthSpec {
                n_train: s.n_train.unwrap_or(base.n_train),
                n_cal: s.n_cal.unwrap_or(base.n_cal),
                m_test: s.n_test.unwrap_or(base.m_test),
                horizon: s.horizon.unwrap_or(base.horizon),
                noise,
                scale,
                drift: s.drift.unwrap_or(base.drift),
                level_sd: s.level_sd.unwrap_or(base.level_sd),
                split: split_mode,
                seed,
            };
            spec.validate()?;
            (DataSource::Synthetic(spec), spec.n_train, spec.n_cal, Some(spec.m_test))
        } else {
            if synth_keys.iter().any(|&k| k) || s.drift.is_some() || s.level_sd.is_some() {
                return Err(cfg_err("synthetic generator keys given together with a panel".into()));
            }
            let n_train = s.n_train.ok_or_else(|| cfg_err("n_train is required with a panel".into()))?;
            let n_cal = s.n_cal.ok_or_else(|| cfg_err("n_cal is required with a panel".into()))?;
            let path = s.panel.clone().expect("checked above");
            (DataSource::Panel { path, predictions: s.predictions.clone() }, n_train, n_cal, s.n_test)
        };
        if n_train == 0 || n_cal == 0 || n_test == Some(0) {
            return Err(cfg_err("split block sizes must be positive".into()));
        }
        Ok(Self {
            command,
            source,
            methods,
            calibration,
            eval_window,
            n_train,
            n_cal,
            n_test,
            split_mode,
            ridge,
            seed,
            replicates,
            output: s.output.unwrap_or_else(|| PathBuf::from("cptd-out")),
            threads: s.threads,
        })
    }

    fn mc_config(&self, spec: SynthSpec) -> McConfig {
        McConfig {
            synth: spec,
            methods: self.methods.clone(),
            calibration: self.calibration,
            replicates: self.replicates,
            window: self.eval_window,
            ridge: self.ridge,
        }
    }
}

struct LoadedData {
    panel: PanelData,
    /// Forecasts for every panel series, when ingested from a file.
    grid: Option<ForecastGrid>,
}

fn load_data(config: &RunConfig) -> Result<LoadedData, CliError> {
    match &config.source {
        DataSource::Panel { path, predictions } => {
            let panel = load_panel(path).map_err(|e| match e {
                PanelError::Io(e) => CliError::Io(format!("{}: {e}", path.display())),
                e => e.into(),
            })?;
            for w in validate_exchangeability_contract(&panel) {
                log::warn!("{w}");
            }
            let grid = predictions.as_ref().map(|p| ingest_external_grid(p, &panel)).transpose()?;
            Ok(LoadedData { panel, grid })
        }
        DataSource::Synthetic(spec) => Ok(LoadedData { panel: harness::generate_panel(spec)?, grid: None }),
    }
}

fn grid_rows(grid: &ForecastGrid, indices: &[usize]) -> Result<ForecastGrid, CliError> {
    Ok(ForecastGrid::from_rows(indices.iter().map(|&i| grid.row(i).to_vec()).collect(), grid.source())?)
}

/// One split of the data, forecasts and intervals for every method.
fn calibrate_split(config: &RunConfig, data: &LoadedData, split_seed: u64) -> Result<(Vec<IntervalSet>, PanelData), CliError> {
    let n = data.panel.len();
    let n_test = config.n_test.unwrap_or_else(|| n.saturating_sub(config.n_train + config.n_cal));
    let spec = crate::panel::SplitSpec { n_train: config.n_train, n_cal: config.n_cal, n_test, mode: config.split_mode, seed: split_seed };
    let [train_idx, cal_idx, test_idx] = split_indices(n, &spec)?;
    let (train, cal, test) = (data.panel.select(&train_idx)?, data.panel.select(&cal_idx)?, data.panel.select(&test_idx)?);
    let fcfg = ForecasterConfig::with_ridge(config.ridge);
    let (train_grid, cal_grid, test_grid) = match &data.grid {
        Some(g) => (grid_rows(g, &train_idx)?, grid_rows(g, &cal_idx)?, grid_rows(g, &test_idx)?),
        None => {
            let model = fit_per_step_linear(&train, &fcfg)?;
            (model.predict_grid(&train)?, model.predict_grid(&cal)?, model.predict_grid(&test)?)
        }
    };
    let error_scales = if config.methods.contains(&Method::LaSplit) {
        let ep = fit_error_predictor(&train, &train_grid, &fcfg, None)?;
        Some(ErrorScales::predict(&ep, &cal, &test)?)
    } else {
        None
    };
    let cdata = CalibrationData { cal: &cal, cal_grid: &cal_grid, test: &test, test_grid: &test_grid, error_scales: error_scales.as_ref() };
    let sets = config
        .methods
        .iter()
        .map(|&m| calibrate_path(&cdata, m, &config.calibration))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((sets, test))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    artifacts: Vec<Artifact>,
}

/// Writes `manifest.json` covering `artifacts` (paths inside `dir`).
fn write_manifest(config: &RunConfig, dir: &Path, artifacts: &[PathBuf]) -> Result<(), CliError> {
    let artifacts = artifacts
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            let name = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
            Ok(Artifact { path: name, sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect::<Result<Vec<_>, std::io::Error>>()?;
    let manifest = Manifest { tool: "cptd", version: env!("CARGO_PKG_VERSION"), seed: config.seed, config, artifacts };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    json.push(b'\n');
    write_file(dir, "manifest.json", &json)?;
    Ok(())
}

fn calibrate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = load_data(config)?;
    let (sets, _) = calibrate_split(config, &data, config.seed)?;
    let bytes = csv_bytes(|b| Ok(write_intervals(&sets, b)?))?;
    Ok(vec![write_file(&config.output, "intervals.csv", &bytes)?])
}

/// Split seed of evaluation replicate `r`.
fn split_seed(seed: u64, r: usize) -> u64 {
    harness::replicate_rng(seed, r as u64).next_u64()
}

fn evaluate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let data = load_data(config)?;
    let reports = (0..config.replicates)
        .map(|r| {
            let (sets, test) = calibrate_split(config, &data, split_seed(config.seed, r))?;
            let meta = ReportMeta {
                seed: config.seed,
                n_cal: config.n_cal,
                n_test: test.len(),
                horizon: test.horizon(),
                alpha: config.calibration.alpha,
            };
            Ok(metrics::evaluate(&sets, &test, config.eval_window, meta)?)
        })
        .collect::<Result<Vec<ExperimentReport>, CliError>>()?;
    let summary = metrics::summarize(&reports);
    let dir = &config.output;
    Ok(vec![
        write_file(dir, "summary.csv", &csv_bytes(|b| Ok(metrics::write_summary_csv(&summary, b)?))?)?,
        write_file(dir, "summary.txt", metrics::summary_table(&summary).as_bytes())?,
        write_file(dir, "replicates.csv", &csv_bytes(|b| Ok(harness::write_replicates_csv(&reports, b)?))?)?,
    ])
}

fn simulate(config: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let DataSource::Synthetic(spec) = config.source else {
        return Err(CliError::Config("simulate needs the synthetic generator".into()));
    };
    let result = harness::run_mc(&config.mc_config(spec))?;
    Ok(harness::write_results(&result, &config.output)?)
}

/// Executes a resolved configuration and writes its outputs.
pub fn run(config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&config.output).map_err(|e| CliError::Io(format!("{}: {e}", config.output.display())))?;
    let artifacts = match config.command {
        CommandKind::Calibrate => calibrate(config)?,
        CommandKind::Evaluate => evaluate(config)?,
        CommandKind::Simulate => simulate(config)?,
    };
    write_manifest(config, &config.output, &artifacts)?;
    log::info!("wrote {} artifacts to {}", artifacts.len() + 1, config.output.display());
    Ok(())
}

/// Entry point shared by the binary: parses arguments, runs, and maps
/// failures to a one-line diagnostic and a non-zero exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let kind = cli.command.kind();
    let result = RunConfig::resolve(kind, cli.command.settings().clone()).and_then(|config| {
        if let Some(n) = config.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        run(&config)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

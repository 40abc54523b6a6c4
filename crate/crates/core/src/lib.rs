//! Distribution-free prediction intervals for cross-sectional time-series panels.
//!
//! A panel holds `N` exchangeable series observed over `T` steps. Point
//! forecasts come from any model (a per-step ridge forecaster ships with the
//! crate) and are turned into prediction intervals by split conformal
//! calibration over the cross-section. Three nonconformity normalizers are
//! available on top of plain split conformal:
//!
//! - **MAD**: the expanding mean of a series' own past absolute residuals.
//! - **Ratio-to-median**: a rank-based normalizer pooled over the whole
//!   cross-section (median-normalized residual means looked up at an
//!   estimated rank percentile).
//! - **LASplit**: an error predictor fit on the proper training set.
//!
//! Every normalizer is a permutation-invariant function of the unordered
//! cross-section, so the resulting intervals keep the finite-sample
//! cross-sectional coverage guarantee of split conformal while adapting to
//! series that are persistently hard to predict.
//!
//! The [`harness`] module runs seeded Monte-Carlo experiments on synthetic
//! panels, and [`cli`] wires everything into the `cptd` executable.

pub mod cli;
pub mod conformal;
pub mod forecaster;
pub mod harness;
pub mod metrics;
pub mod numfmt;
pub mod order;
pub mod panel;

pub use conformal::{
    calibrate_path, conformal_quantile, CalibrationConfig, CalibrationContext, IntervalSet,
    Method, NormalizerState, PredictionInterval,
};
pub use forecaster::{ForecastGrid, ForecastSource, ForecasterConfig, PerStepLinearModel};
pub use metrics::{EvalWindow, ExperimentReport};
pub use panel::{PanelData, SeriesRecord, SplitMode, SplitSpec};

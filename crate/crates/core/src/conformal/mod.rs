//! Split conformal calibration with temporally informed normalizers.
//!
//! For a test series at target step `t` the calibration set contributes one
//! nonconformity score per series,
//!
//! ```text
//! v_i = |y_{i,t} - ŷ_{i,t}| / m̂_{i,t}
//! ```
//!
//! and the interval is `ŷ ± v̂ · m̂_{test,t}` where `v̂` is the
//! `⌈(1-α)(N+1)⌉`-th smallest of `{v_i} ∪ {+∞}`. The normalizer `m̂` is what
//! distinguishes the methods:
//!
//! | method     | `m̂_{i,t}`                                                        |
//! |------------|------------------------------------------------------------------|
//! | `split`    | `1`                                                              |
//! | `cptd_mad` | mean of `|r_{i,s}|` over `s < t`                                 |
//! | `cptd_rat` | pooled quantile of median-normalized residual means at rank `q̂_i` |
//! | `lasplit`  | error predictor fit on the proper training set                   |
//!
//! Each `m̂_i` is a function of series `i`'s own past and of the *unordered*
//! set of all `N + 1` pasts, so the scores stay exchangeable and coverage
//! `≥ 1 - α` holds at every step. At `t = 0` there is no past; both CPTD
//! normalizers fall back to `m̂ ≡ 1`.

mod context;
mod interval;
mod normalizer;
mod path;
mod quantile;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use context::CalibrationContext;
pub use interval::{read_intervals, write_intervals, IntervalSet, PredictionInterval};
pub use normalizer::{
    empirical_cdf, estimate_rank, identity_normalizer, lasplit_normalizer, lookup_normalizer,
    mad_normalizer, median_residuals, normalize, normalized_residual_mean, rat_normalizer,
    ErrorScales, NormalizerState, RatIntermediates,
};
pub use path::{build_pi, calibrate_path, calibrate_step, CalibrationData};
pub use quantile::conformal_quantile;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformalError {
    #[error("no calibration scores")]
    EmptyScores,
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("non-finite nonconformity score")]
    NonFiniteScore,
    #[error("normalizer needs at least one past step")]
    NoHistory,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("method `lasplit` needs error-predictor scales")]
    MissingErrorScales,
    #[error("invalid calibration setting: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Split,
    CptdMad,
    CptdRat,
    #[serde(rename = "lasplit")]
    LaSplit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Split, Method::CptdMad, Method::CptdRat, Method::LaSplit];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Split => "split",
            Method::CptdMad => "cptd_mad",
            Method::CptdRat => "cptd_rat",
            Method::LaSplit => "lasplit",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected split, cptd_mad, cptd_rat or lasplit)"))
    }
}

/// Knobs shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    /// Weight `λ` of the prior rank percentile 0.5 in `q̂`.
    pub prior_weight: f64,
    /// Exponential decay for the MAD normalizer; `None` is the plain mean.
    pub mad_decay: Option<f64>,
    /// `ε_floor = floor_scale × (1 + mean |y_cal|)` over calibration
    /// responses visible at the target step.
    pub floor_scale: f64,
    /// Fixed `ε_floor`, overriding `floor_scale`.
    pub floor: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { alpha: 0.1, prior_weight: 1.0, mad_decay: None, floor_scale: 1e-12, floor: None }
    }
}

impl CalibrationConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self { alpha, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConformalError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConformalError::InvalidAlpha(self.alpha));
        }
        if !(self.prior_weight.is_finite() && self.prior_weight > 0.0) {
            return Err(ConformalError::InvalidConfig(format!("prior weight {}", self.prior_weight)));
        }
        if let Some(d) = self.mad_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(ConformalError::InvalidConfig(format!("mad decay {d} outside (0, 1]")));
            }
        }
        if !(self.floor_scale.is_finite() && self.floor_scale > 0.0) {
            return Err(ConformalError::InvalidConfig(format!("floor scale {}", self.floor_scale)));
        }
        if let Some(f) = self.floor {
            if !(f.is_finite() && f > 0.0) {
                return Err(ConformalError::InvalidConfig(format!("floor {f}")));
            }
        }
        Ok(())
    }
}

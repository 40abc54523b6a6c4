use super::{CalibrationConfig, ConformalError};
use crate::order;

/// Everything observable when building the interval for one test series at
/// one target step `t`: calibration responses and predictions at steps
/// `<= t`, the test series' responses at steps `< t` and its predictions at
/// steps `<= t`.
///
/// Slices are truncated on construction, so nothing beyond the target step
/// (and not the test response at the target step) can leak into a
/// normalizer.
#[derive(Debug, Clone)]
pub struct CalibrationContext<'a> {
    step: usize,
    test_id: &'a str,
    cal_y: Vec<&'a [f64]>,
    cal_y_hat: Vec<&'a [f64]>,
    test_y: &'a [f64],
    test_y_hat: &'a [f64],
    alpha: f64,
    floor: f64,
}

impl<'a> CalibrationContext<'a> {
    /// Builds a context from full-length rows. Row `i` of `cal_y` pairs with
    /// row `i` of `cal_y_hat`.
    pub fn new(
        step: usize,
        test_id: &'a str,
        cal_y: &[&'a [f64]],
        cal_y_hat: &[&'a [f64]],
        test_y: &'a [f64],
        test_y_hat: &'a [f64],
        config: &CalibrationConfig,
    ) -> Result<Self, ConformalError> {
        config.validate()?;
        if cal_y.is_empty() {
            return Err(ConformalError::EmptyScores);
        }
        if cal_y.len() != cal_y_hat.len() {
            return Err(ConformalError::ShapeMismatch(format!(
                "{} calibration responses vs {} prediction rows",
                cal_y.len(),
                cal_y_hat.len()
            )));
        }
        let short = |rows: &[&[f64]]| rows.iter().any(|r| r.len() <= step);
        if short(cal_y) || short(cal_y_hat) || test_y.len() < step || test_y_hat.len() <= step {
            return Err(ConformalError::ShapeMismatch(format!("rows too short for step {step}")));
        }
        let cal_y: Vec<&[f64]> = cal_y.iter().map(|r| &r[..=step]).collect();
        let floor = config.floor.unwrap_or_else(|| floor_for(config.floor_scale, &cal_y));
        let ctx = Self {
            step,
            test_id,
            cal_y,
            cal_y_hat: cal_y_hat.iter().map(|r| &r[..=step]).collect(),
            test_y: &test_y[..step],
            test_y_hat: &test_y_hat[..=step],
            alpha: config.alpha,
            floor,
        };
        let finite = |rows: &[&[f64]]| rows.iter().flat_map(|r| r.iter()).all(|v| v.is_finite());
        if !finite(&ctx.cal_y) || !finite(&ctx.cal_y_hat) || !finite(&[ctx.test_y, ctx.test_y_hat]) {
            return Err(ConformalError::NonFiniteScore);
        }
        Ok(ctx)
    }

    /// Target step (0-based). Also the number of past steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn test_id(&self) -> &str {
        self.test_id
    }

    /// Number of calibration series `N`.
    pub fn n_cal(&self) -> usize {
        self.cal_y.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// `|r_{i,s}|` for `s < step`; series `N` is the test series.
    pub fn past_abs_residual(&self, i: usize, s: usize) -> f64 {
        assert!(s < self.step, "step {s} is not in the past of {}", self.step);
        if i < self.n_cal() {
            (self.cal_y[i][s] - self.cal_y_hat[i][s]).abs()
        } else {
            (self.test_y[s] - self.test_y_hat[s]).abs()
        }
    }

    /// The `N + 1` pooled `|r_{·,s}|` for a past step, test series last.
    pub fn pooled_abs_residuals(&self, s: usize) -> Vec<f64> {
        (0..=self.n_cal()).map(|i| self.past_abs_residual(i, s)).collect()
    }

    /// `|y_{i,t} - ŷ_{i,t}|` for calibration series `i` at the target step.
    pub fn target_abs_residual(&self, i: usize) -> f64 {
        (self.cal_y[i][self.step] - self.cal_y_hat[i][self.step]).abs()
    }

    pub fn test_prediction(&self) -> f64 {
        self.test_y_hat[self.step]
    }
}

/// `scale × (1 + mean |y|)`, summed in sorted order so the value does not
/// depend on the order of the calibration series.
pub(crate) fn floor_for(scale: f64, cal_y: &[&[f64]]) -> f64 {
    scale * (1.0 + order::order_free_mean_abs(cal_y.iter().flat_map(|r| r.iter())))
}

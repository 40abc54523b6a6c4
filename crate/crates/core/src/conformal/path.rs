use rayon::prelude::*;

use super::context::floor_for;
use super::normalizer::{lookup_sorted, mad_value, normalize, q_hat_value, ErrorScales, NormalizerState};
use super::{conformal_quantile, CalibrationConfig, CalibrationContext, ConformalError, IntervalSet, Method, PredictionInterval};
use crate::forecaster::ForecastGrid;
use crate::order;
use crate::panel::PanelData;

/// Interval for the context's test series at its target step.
pub fn build_pi(ctx: &CalibrationContext<'_>, norm: &NormalizerState) -> Result<PredictionInterval, ConformalError> {
    let n = ctx.n_cal();
    if norm.m_hat.len() != n + 1 {
        return Err(ConformalError::ShapeMismatch(format!(
            "normalizer has {} entries for {} calibration series",
            norm.m_hat.len(),
            n
        )));
    }
    let scores: Vec<f64> = (0..n).map(|i| ctx.target_abs_residual(i) / norm.m_hat[i]).collect();
    let v_hat = conformal_quantile(&scores, ctx.alpha())?;
    Ok(PredictionInterval {
        series_id: ctx.test_id().to_string(),
        step: ctx.step(),
        center: ctx.test_prediction(),
        half_width: scale_threshold(v_hat, norm.test_m_hat()),
        alpha: ctx.alpha(),
    })
}

fn scale_threshold(v_hat: f64, m_hat: f64) -> f64 {
    if v_hat.is_infinite() {
        f64::INFINITY
    } else {
        v_hat * m_hat
    }
}

/// Normalizer plus interval for a single context. `lasplit` carries the
/// error scales and the test series' row in them.
pub fn calibrate_step(
    ctx: &CalibrationContext<'_>,
    method: Method,
    config: &CalibrationConfig,
    lasplit: Option<(&ErrorScales, usize)>,
) -> Result<PredictionInterval, ConformalError> {
    build_pi(ctx, &normalize(ctx, method, config, lasplit)?)
}

/// Calibration and test blocks with their prediction grids.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationData<'a> {
    pub cal: &'a PanelData,
    pub cal_grid: &'a ForecastGrid,
    pub test: &'a PanelData,
    pub test_grid: &'a ForecastGrid,
    /// Required for [`Method::LaSplit`].
    pub error_scales: Option<&'a ErrorScales>,
}

impl CalibrationData<'_> {
    fn check(&self) -> Result<(), ConformalError> {
        let shape = |e: crate::forecaster::ForecastError| ConformalError::ShapeMismatch(e.to_string());
        self.cal_grid.check_aligned(self.cal).map_err(shape)?;
        self.test_grid.check_aligned(self.test).map_err(shape)?;
        if self.cal.horizon() != self.test.horizon() {
            return Err(ConformalError::ShapeMismatch("calibration and test horizons differ".into()));
        }
        if let Some(s) = self.error_scales {
            s.cal.check_aligned(self.cal).map_err(shape)?;
            s.test.check_aligned(self.test).map_err(shape)?;
        }
        Ok(())
    }
}

/// Calibration-block quantities shared by every test series.
struct CalTables {
    n: usize,
    horizon: usize,
    /// `|r_{j,s}|`, row per calibration series.
    abs_res: Vec<Vec<f64>>,
    /// `ε` for each target step.
    floors: Vec<f64>,
    /// Sorted `|r_{·,s}|` per step.
    sorted: Vec<Vec<f64>>,
    /// `#{k in cal : |r_{k,s}| <= |r_{j,s}|}` per step, per series.
    count_le: Vec<Vec<usize>>,
}

impl CalTables {
    fn new(data: &CalibrationData<'_>, config: &CalibrationConfig, with_ranks: bool) -> Self {
        let n = data.cal.len();
        let horizon = data.cal.horizon();
        let abs_res: Vec<Vec<f64>> = (0..n)
            .map(|j| data.cal.y(j).iter().zip(data.cal_grid.row(j)).map(|(y, p)| (y - p).abs()).collect())
            .collect();
        let floors = (0..horizon)
            .map(|t| {
                config.floor.unwrap_or_else(|| {
                    let rows: Vec<&[f64]> = (0..n).map(|j| &data.cal.y(j)[..=t]).collect();
                    floor_for(config.floor_scale, &rows)
                })
            })
            .collect();
        let column = |s: usize| abs_res.iter().map(|r| r[s]).collect::<Vec<_>>();
        let sorted: Vec<Vec<f64>> = if with_ranks { (0..horizon).map(|s| order::sorted(&column(s))).collect() } else { Vec::new() };
        let count_le = sorted
            .iter()
            .enumerate()
            .map(|(s, sorted_s)| abs_res.iter().map(|r| order::count_le(sorted_s, r[s])).collect())
            .collect();
        Self { n, horizon, abs_res, floors, sorted, count_le }
    }

    fn target_scores(&self, t: usize, m_hat: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.n).map(|j| self.abs_res[j][t] / m_hat(j)).collect()
    }

    /// Median of the calibration column `s` with `extra` inserted.
    fn pooled_median(&self, s: usize, extra: f64) -> f64 {
        let sorted = &self.sorted[s];
        let pos = sorted.partition_point(|v| v.total_cmp(&extra).is_lt());
        let at = |k: usize| match k.cmp(&pos) {
            std::cmp::Ordering::Less => sorted[k],
            std::cmp::Ordering::Equal => extra,
            std::cmp::Ordering::Greater => sorted[k - 1],
        };
        let n1 = self.n + 1;
        if n1 % 2 == 1 {
            at(n1 / 2)
        } else {
            0.5 * (at(n1 / 2 - 1) + at(n1 / 2))
        }
    }
}

/// Intervals for every test series at every step.
///
/// Each test series is calibrated against the calibration block using only
/// its own past; other test series never enter its contexts. The result
/// equals running [`calibrate_step`] on a fresh [`CalibrationContext`] per
/// `(series, step)`, computed with shared per-step tables so a path costs
/// `O(T · N log N)` per test series.
pub fn calibrate_path(data: &CalibrationData<'_>, method: Method, config: &CalibrationConfig) -> Result<IntervalSet, ConformalError> {
    config.validate()?;
    data.check()?;
    if data.cal.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if method == Method::LaSplit && data.error_scales.is_none() {
        return Err(ConformalError::MissingErrorScales);
    }
    let tables = CalTables::new(data, config, method == Method::CptdRat);
    let alpha = config.alpha;

    // Split-conformal thresholds also serve the t = 0 fallback.
    let split_v: Vec<f64> = (0..tables.horizon)
        .map(|t| conformal_quantile(&tables.target_scores(t, |_| 1.0), alpha))
        .collect::<Result<_, _>>()?;

    // Methods whose calibration normalizers do not depend on the test series
    // get one threshold per step.
    let shared_v: Option<Vec<f64>> = match method {
        Method::Split => Some(split_v.clone()),
        Method::CptdMad => Some(
            (0..tables.horizon)
                .map(|t| {
                    if t == 0 {
                        return Ok(split_v[0]);
                    }
                    let scores = tables.target_scores(t, |j| {
                        mad_value(tables.abs_res[j][..t].iter().copied(), config.mad_decay).max(tables.floors[t])
                    });
                    conformal_quantile(&scores, alpha)
                })
                .collect::<Result<_, _>>()?,
        ),
        Method::LaSplit => {
            let scales = data.error_scales.expect("checked above");
            Some(
                (0..tables.horizon)
                    .map(|t| {
                        let floor = scales.floor.max(tables.floors[t]);
                        conformal_quantile(&tables.target_scores(t, |j| scales.cal.get(j, t).max(floor)), alpha)
                    })
                    .collect::<Result<_, _>>()?,
            )
        }
        Method::CptdRat => None,
    };

    let intervals = (0..data.test.len())
        .into_par_iter()
        .map(|row| {
            let y = data.test.y(row);
            let y_hat = data.test_grid.row(row);
            let abs_res: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).collect();
            let half_widths = match method {
                Method::Split => split_v.clone(),
                Method::CptdMad => {
                    let v = shared_v.as_ref().expect("shared thresholds");
                    (0..tables.horizon)
                        .map(|t| {
                            if t == 0 {
                                return v[0];
                            }
                            let m = mad_value(abs_res[..t].iter().copied(), config.mad_decay).max(tables.floors[t]);
                            scale_threshold(v[t], m)
                        })
                        .collect()
                }
                Method::LaSplit => {
                    let v = shared_v.as_ref().expect("shared thresholds");
                    let scales = data.error_scales.expect("checked above");
                    (0..tables.horizon)
                        .map(|t| {
                            let floor = scales.floor.max(tables.floors[t]);
                            scale_threshold(v[t], scales.test.get(row, t).max(floor))
                        })
                        .collect()
                }
                Method::CptdRat => rat_path(&tables, &abs_res, &split_v, config)?,
            };
            let id = &data.test.series()[row].id;
            Ok(half_widths
                .into_iter()
                .enumerate()
                .map(|(t, half_width)| PredictionInterval {
                    series_id: id.clone(),
                    step: t,
                    center: y_hat[t],
                    half_width,
                    alpha,
                })
                .collect())
        })
        .collect::<Result<Vec<_>, ConformalError>>()?;
    Ok(IntervalSet { method, alpha, intervals })
}

/// Half-widths of the ratio-to-median method along one test path.
fn rat_path(tables: &CalTables, test_res: &[f64], split_v: &[f64], config: &CalibrationConfig) -> Result<Vec<f64>, ConformalError> {
    let n = tables.n;
    let n1 = n + 1;
    let mut out = Vec::with_capacity(tables.horizon);
    out.push(split_v[0]);
    let mut rank_sum = vec![0.0; n1];
    let mut raw_medians = Vec::with_capacity(tables.horizon);
    let mut nr = vec![0.0; n1];
    for t in 1..tables.horizon {
        let s = t - 1;
        let a = test_res[s];
        for (j, acc) in rank_sum[..n].iter_mut().enumerate() {
            let count = tables.count_le[s][j] + usize::from(a <= tables.abs_res[j][s]);
            *acc += count as f64 / n1 as f64;
        }
        rank_sum[n] += (order::count_le(&tables.sorted[s], a) + 1) as f64 / n1 as f64;
        raw_medians.push(tables.pooled_median(s, a));

        let floor = tables.floors[t];
        let medians: Vec<f64> = raw_medians.iter().map(|m| m.max(floor)).collect();
        for (j, slot) in nr.iter_mut().enumerate() {
            let res = if j < n { &tables.abs_res[j][..t] } else { &test_res[..t] };
            *slot = res.iter().zip(&medians).map(|(r, m)| r / m).sum::<f64>() / t as f64;
        }
        let q_hat: Vec<f64> = rank_sum.iter().map(|&f| q_hat_value(f, t, config.prior_weight)).collect();
        let m_hat = lookup_sorted(&q_hat, &order::sorted(&nr), floor);
        let scores = tables.target_scores(t, |j| m_hat[j]);
        out.push(scale_threshold(conformal_quantile(&scores, config.alpha)?, m_hat[n]));
    }
    Ok(out)
}

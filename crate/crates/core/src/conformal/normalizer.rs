use serde::Serialize;

use super::{CalibrationConfig, CalibrationContext, ConformalError, Method};
use crate::forecaster::{ErrorPredictorModel, ForecastGrid};
use crate::order;
use crate::panel::PanelData;

/// Per-series normalizers `m̂_{i,t}` for one target step; entry `N` is the
/// test series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizerState {
    pub method: Method,
    /// `true` when a CPTD method fell back to the identity at `t = 0`.
    pub fallback: bool,
    pub m_hat: Vec<f64>,
    pub rat: Option<RatIntermediates>,
}

impl NormalizerState {
    pub fn test_m_hat(&self) -> f64 {
        *self.m_hat.last().expect("non-empty normalizer")
    }
}

/// Statistics behind the ratio-to-median normalizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatIntermediates {
    /// `m_s` for every past step.
    pub medians: Vec<f64>,
    /// `nr_{i,t}` for every series.
    pub nr: Vec<f64>,
    /// `q̂_{i,t}` for every series.
    pub q_hat: Vec<f64>,
}

/// `m̂ ≡ 1`: plain split conformal on absolute residuals.
pub fn identity_normalizer(ctx: &CalibrationContext<'_>) -> NormalizerState {
    NormalizerState { method: Method::Split, fallback: false, m_hat: vec![1.0; ctx.n_cal() + 1], rat: None }
}

/// Mean of past absolute residuals, given in step order. With a decay `δ`
/// the weights are `δ^(t-1-s)`.
pub(crate) fn mad_value(residuals: impl ExactSizeIterator<Item = f64>, decay: Option<f64>) -> f64 {
    let t = residuals.len();
    match decay {
        None => residuals.sum::<f64>() / t as f64,
        Some(d) => {
            let (mut num, mut den) = (0.0, 0.0);
            for (s, r) in residuals.enumerate() {
                let w = d.powi((t - 1 - s) as i32);
                num += w * r;
                den += w;
            }
            num / den
        }
    }
}

/// `m̂_{i,t} = max(ε, (1/t) Σ_{s<t} |r_{i,s}|)` for every series.
pub fn mad_normalizer(ctx: &CalibrationContext<'_>, decay: Option<f64>) -> Result<NormalizerState, ConformalError> {
    let t = ctx.step();
    if t == 0 {
        return Err(ConformalError::NoHistory);
    }
    let m_hat = (0..=ctx.n_cal())
        .map(|i| mad_value((0..t).map(|s| ctx.past_abs_residual(i, s)), decay).max(ctx.floor()))
        .collect();
    Ok(NormalizerState { method: Method::CptdMad, fallback: false, m_hat, rat: None })
}

/// Cross-sectional median of `|r_{·,s}|` over all `N + 1` series for every
/// past step, floored at `ε`.
pub fn median_residuals(ctx: &CalibrationContext<'_>) -> Result<Vec<f64>, ConformalError> {
    if ctx.step() == 0 {
        return Err(ConformalError::NoHistory);
    }
    Ok((0..ctx.step())
        .map(|s| order::median(&ctx.pooled_abs_residuals(s)).max(ctx.floor()))
        .collect())
}

/// `nr_{i,t} = (1/t) Σ_{s<t} |r_{i,s}| / m_s` for every series.
pub fn normalized_residual_mean(ctx: &CalibrationContext<'_>, medians: &[f64]) -> Result<Vec<f64>, ConformalError> {
    let t = ctx.step();
    if t == 0 {
        return Err(ConformalError::NoHistory);
    }
    if medians.len() != t {
        return Err(ConformalError::ShapeMismatch(format!("{} medians for {t} past steps", medians.len())));
    }
    Ok((0..=ctx.n_cal())
        .map(|i| (0..t).map(|s| ctx.past_abs_residual(i, s) / medians[s]).sum::<f64>() / t as f64)
        .collect())
}

/// `F̂(r) = #{v ≤ r} / n` over `values`.
pub fn empirical_cdf(values: &[f64], r: f64) -> f64 {
    values.iter().filter(|&&v| v <= r).count() as f64 / values.len() as f64
}

/// Expanding mean of past rank percentiles with a prior of 0.5 at weight `λ`:
/// `q̂_{i,t} = (0.5 λ + Σ_{s<t} F̂_s(|r_{i,s}|)) / (t + λ)`.
pub fn estimate_rank(ctx: &CalibrationContext<'_>, prior_weight: f64) -> Vec<f64> {
    let n1 = ctx.n_cal() + 1;
    let t = ctx.step();
    let mut rank_sum = vec![0.0; n1];
    for s in 0..t {
        let pooled = ctx.pooled_abs_residuals(s);
        let sorted = order::sorted(&pooled);
        for (acc, &r) in rank_sum.iter_mut().zip(&pooled) {
            *acc += order::count_le(&sorted, r) as f64 / n1 as f64;
        }
    }
    rank_sum.into_iter().map(|f| q_hat_value(f, t, prior_weight)).collect()
}

pub(crate) fn q_hat_value(rank_sum: f64, t: usize, prior_weight: f64) -> f64 {
    (0.5 * prior_weight + rank_sum) / (t as f64 + prior_weight)
}

/// `m̂_i = Q(q̂_i, {nr_j})`: the `max(1, ⌈q̂_i (N+1)⌉)`-th smallest `nr`,
/// floored at `ε`.
pub fn lookup_normalizer(q_hat: &[f64], nr: &[f64], floor: f64) -> Vec<f64> {
    let sorted = order::sorted(nr);
    lookup_sorted(q_hat, &sorted, floor)
}

pub(crate) fn lookup_sorted(q_hat: &[f64], sorted_nr: &[f64], floor: f64) -> Vec<f64> {
    let n1 = sorted_nr.len();
    q_hat
        .iter()
        .map(|&q| {
            let k = order::ceil_rank(q * n1 as f64).clamp(1, n1);
            sorted_nr[k - 1].max(floor)
        })
        .collect()
}

/// Ratio-to-median-residual normalizer: medians, ranks, normalized means,
/// then the rank lookup.
pub fn rat_normalizer(ctx: &CalibrationContext<'_>, prior_weight: f64) -> Result<NormalizerState, ConformalError> {
    let medians = median_residuals(ctx)?;
    let q_hat = estimate_rank(ctx, prior_weight);
    let nr = normalized_residual_mean(ctx, &medians)?;
    let m_hat = lookup_normalizer(&q_hat, &nr, ctx.floor());
    Ok(NormalizerState {
        method: Method::CptdRat,
        fallback: false,
        m_hat,
        rat: Some(RatIntermediates { medians, nr, q_hat }),
    })
}

/// Error-predictor outputs for the calibration and test blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorScales {
    pub cal: ForecastGrid,
    pub test: ForecastGrid,
    pub floor: f64,
}

impl ErrorScales {
    pub fn predict(model: &ErrorPredictorModel, cal: &PanelData, test: &PanelData) -> Result<Self, crate::forecaster::ForecastError> {
        Ok(Self { cal: model.predict_grid(cal)?, test: model.predict_grid(test)?, floor: model.floor })
    }
}

/// `m̂_{i,t}` = predicted `|r_{i,t}|`, floored at the predictor's `ε_pred`
/// (and at the context's `ε`).
pub fn lasplit_normalizer(
    ctx: &CalibrationContext<'_>,
    cal_scales: &ForecastGrid,
    test_scales: &[f64],
    error_floor: f64,
) -> Result<NormalizerState, ConformalError> {
    let t = ctx.step();
    if cal_scales.len() != ctx.n_cal() || cal_scales.horizon() <= t || test_scales.len() <= t {
        return Err(ConformalError::ShapeMismatch(format!(
            "error predictor covers {}x{} calibration cells, context needs {}x{}",
            cal_scales.len(),
            cal_scales.horizon(),
            ctx.n_cal(),
            t + 1
        )));
    }
    let floor = error_floor.max(ctx.floor());
    let m_hat = (0..ctx.n_cal())
        .map(|i| cal_scales.get(i, t))
        .chain(std::iter::once(test_scales[t]))
        .map(|m| m.max(floor))
        .collect();
    Ok(NormalizerState { method: Method::LaSplit, fallback: false, m_hat, rat: None })
}

/// Normalizer for `method`, falling back to the identity for the CPTD
/// methods at `t = 0`. `lasplit` needs the error scales and the test row.
pub fn normalize(
    ctx: &CalibrationContext<'_>,
    method: Method,
    config: &CalibrationConfig,
    lasplit: Option<(&ErrorScales, usize)>,
) -> Result<NormalizerState, ConformalError> {
    let fallback = |m: Method| NormalizerState { method: m, fallback: true, ..identity_normalizer(ctx) };
    match method {
        Method::Split => Ok(identity_normalizer(ctx)),
        Method::CptdMad if ctx.step() == 0 => Ok(fallback(method)),
        Method::CptdRat if ctx.step() == 0 => Ok(fallback(method)),
        Method::CptdMad => mad_normalizer(ctx, config.mad_decay),
        Method::CptdRat => rat_normalizer(ctx, config.prior_weight),
        Method::LaSplit => {
            let (scales, row) = lasplit.ok_or(ConformalError::MissingErrorScales)?;
            if row >= scales.test.len() {
                return Err(ConformalError::ShapeMismatch(format!("no error scales for test row {row}")));
            }
            lasplit_normalizer(ctx, &scales.cal, scales.test.row(row), scales.floor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ForecastSource;

    /// Panel with predictions ≡ 0, so residuals are the responses.
    struct Fixture {
        cal: Vec<Vec<f64>>,
        test: Vec<f64>,
        zeros: Vec<f64>,
    }

    impl Fixture {
        /// `rows` are residual histories; the last row is the test series.
        /// Each row gets one extra target-step response of 1.
        fn new(rows: &[&[f64]]) -> Self {
            let (test, cal) = rows.split_last().unwrap();
            let extend = |r: &[f64]| r.iter().copied().chain([1.0]).collect::<Vec<_>>();
            let t = test.len();
            Self { cal: cal.iter().map(|r| extend(r)).collect(), test: test.to_vec(), zeros: vec![0.0; t + 1] }
        }

        fn ctx(&self, floor: f64) -> CalibrationContext<'_> {
            let cal: Vec<&[f64]> = self.cal.iter().map(Vec::as_slice).collect();
            let zeros: Vec<&[f64]> = vec![&self.zeros; cal.len()];
            let cfg = CalibrationConfig { floor: Some(floor), ..CalibrationConfig::default() };
            CalibrationContext::new(self.test.len(), "test", &cal, &zeros, &self.test, &self.zeros, &cfg).unwrap()
        }
    }

    #[test]
    fn mad_examples() {
        let f = Fixture::new(&[&[2.0, 2.0], &[4.0, 4.0]]);
        assert_eq!(mad_normalizer(&f.ctx(1e-12), None).unwrap().m_hat, vec![2.0, 4.0]);
        let f = Fixture::new(&[&[1.0, -2.0, 3.0], &[1.0, 2.0, 3.0]]);
        assert_eq!(mad_normalizer(&f.ctx(1e-12), None).unwrap().m_hat, vec![2.0, 2.0]);
        let f = Fixture::new(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(mad_normalizer(&f.ctx(1e-12), None).unwrap().m_hat, vec![1e-12, 1e-12]);
        let f = Fixture::new(&[&[], &[]]);
        assert_eq!(mad_normalizer(&f.ctx(1e-12), None), Err(ConformalError::NoHistory));
    }

    #[test]
    fn mad_decay_weights_recent_steps() {
        let f = Fixture::new(&[&[1.0, 3.0], &[1.0, 3.0]]);
        let m = mad_normalizer(&f.ctx(1e-12), Some(0.5)).unwrap().m_hat;
        assert!((m[0] - (0.5 * 1.0 + 3.0) / 1.5).abs() < 1e-15);
    }

    #[test]
    fn median_examples() {
        let f = Fixture::new(&[&[1.0], &[3.0], &[2.0]]);
        assert_eq!(median_residuals(&f.ctx(1e-12)).unwrap(), vec![2.0]);
        let f = Fixture::new(&[&[1.0], &[2.0], &[10.0], &[3.0]]);
        assert_eq!(median_residuals(&f.ctx(1e-12)).unwrap(), vec![2.5]);
        let f = Fixture::new(&[&[0.0], &[0.0], &[0.0]]);
        assert_eq!(median_residuals(&f.ctx(1e-12)).unwrap(), vec![1e-12]);
    }

    #[test]
    fn normalized_residual_examples() {
        let f = Fixture::new(&[&[2.0, 8.0], &[2.0, 4.0], &[2.0, 4.0]]);
        let ctx = f.ctx(1e-12);
        let medians = median_residuals(&ctx).unwrap();
        assert_eq!(medians, vec![2.0, 4.0]);
        let nr = normalized_residual_mean(&ctx, &medians).unwrap();
        assert_eq!(nr, vec![1.5, 1.0, 1.0]);
        assert_eq!(normalized_residual_mean(&ctx, &[2.0, 2.0]).unwrap(), vec![2.5, 1.5, 1.5]);
        let f = Fixture::new(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 2.0]]);
        let ctx = f.ctx(1e-12);
        assert_eq!(normalized_residual_mean(&ctx, &median_residuals(&ctx).unwrap()).unwrap()[0], 0.0);
    }

    #[test]
    fn rank_examples() {
        let f = Fixture::new(&[&[], &[], &[]]);
        assert_eq!(estimate_rank(&f.ctx(1e-12), 1.0), vec![0.5; 3]);
        let f = Fixture::new(&[&[9.0], &[1.0], &[2.0], &[3.0]]);
        let q = estimate_rank(&f.ctx(1e-12), 1.0);
        assert_eq!(q[0], 0.75);
        assert_eq!(q[2], 0.5);
    }

    #[test]
    fn lookup_examples() {
        assert_eq!(lookup_normalizer(&[0.5], &[3.0, 1.0, 2.0], 1e-12), vec![2.0]);
        assert_eq!(lookup_normalizer(&[0.01, 0.5, 0.99], &[1.5; 3], 1e-12), vec![1.5; 3]);
        assert_eq!(lookup_normalizer(&[0.5], &[0.0; 3], 1e-12), vec![1e-12]);
    }

    #[test]
    fn rat_hand_fixture() {
        // residual paths [1,2], [2,4], [3,6]; test series is the last one.
        let f = Fixture::new(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let state = rat_normalizer(&f.ctx(1e-12), 1.0).unwrap();
        let rat = state.rat.as_ref().unwrap();
        assert_eq!(rat.medians, vec![2.0, 4.0]);
        assert_eq!(rat.nr, vec![0.5, 1.0, 1.5]);
        assert!((rat.q_hat[0] - (0.5 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(state.m_hat[0], 1.0);
        // q̂ = (0.5 + 1 + 1)/3 for the series holding the maximum both times
        assert!((rat.q_hat[2] - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(state.m_hat[2], 1.5);
        assert!(rat.q_hat.iter().all(|&q| q > 0.0 && q < 1.0));
    }

    #[test]
    fn rat_symmetric_paths_give_equal_normalizers() {
        let row: &[f64] = &[1.0, 5.0, 2.0];
        let f = Fixture::new(&[row; 4]);
        let state = rat_normalizer(&f.ctx(1e-12), 1.0).unwrap();
        assert!(state.m_hat.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(rat_normalizer(&Fixture::new(&[&[], &[]]).ctx(1e-12), 1.0), Err(ConformalError::NoHistory));
    }

    #[test]
    fn ecdf_properties() {
        let v = [0.3, 1.0, 0.1, 0.7];
        assert_eq!(empirical_cdf(&v, 1.0), 1.0);
        assert_eq!(empirical_cdf(&v, 0.0), 0.0);
        let mut last = 0.0;
        for r in [0.0, 0.1, 0.2, 0.3, 0.7, 0.9, 1.0, 2.0] {
            let f = empirical_cdf(&v, r);
            assert!(f >= last);
            last = f;
        }
    }

    #[test]
    fn lasplit_examples() {
        let f = Fixture::new(&[&[1.0], &[2.0], &[3.0]]);
        let ctx = f.ctx(1e-12);
        let grid = |v: f64| ForecastGrid::from_rows(vec![vec![v; 2]; 2], ForecastSource::ErrorPredictor).unwrap();
        let m = lasplit_normalizer(&ctx, &grid(3.0), &[3.0, 3.0], 1e-6).unwrap();
        assert_eq!(m.m_hat, vec![3.0; 3]);
        let m = lasplit_normalizer(&ctx, &grid(0.0), &[0.0, 0.0], 1e-6).unwrap();
        assert_eq!(m.m_hat, vec![1e-6; 3]);
        let short = ForecastGrid::from_rows(vec![vec![1.0; 2]; 3], ForecastSource::ErrorPredictor).unwrap();
        assert!(matches!(lasplit_normalizer(&ctx, &short, &[1.0, 1.0], 1e-6), Err(ConformalError::ShapeMismatch(_))));
    }

    #[test]
    fn cptd_methods_fall_back_at_first_step() {
        let f = Fixture::new(&[&[], &[]]);
        let ctx = f.ctx(1e-12);
        for m in [Method::CptdMad, Method::CptdRat] {
            let s = normalize(&ctx, m, &CalibrationConfig::default(), None).unwrap();
            assert!(s.fallback);
            assert_eq!(s.m_hat, vec![1.0, 1.0]);
        }
        assert_eq!(
            normalize(&ctx, Method::LaSplit, &CalibrationConfig::default(), None),
            Err(ConformalError::MissingErrorScales)
        );
    }
}

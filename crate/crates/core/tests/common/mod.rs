//! Straight-line reference for interval construction, written directly from
//! the formulas without sharing code with the engine. Ranks are computed in
//! exact integer arithmetic.

#![allow(dead_code, clippy::needless_range_loop)]

use cptd::Method;

/// One tiny calibration problem: full grids, test series separate.
pub struct Problem {
    pub cal_y: Vec<Vec<f64>>,
    pub cal_hat: Vec<Vec<f64>>,
    pub test_y: Vec<Vec<f64>>,
    pub test_hat: Vec<Vec<f64>>,
    /// Error-predictor outputs (already floored by the predictor).
    pub cal_scale: Vec<Vec<f64>>,
    pub test_scale: Vec<Vec<f64>>,
    pub scale_floor: f64,
    /// `α = alpha_pct / 100`.
    pub alpha_pct: u64,
}

/// `(center, half_width)` for test series `j` at step `t`.
pub fn reference_interval(p: &Problem, method: Method, j: usize, t: usize) -> (f64, f64) {
    let n = p.cal_y.len();
    let n1 = n + 1;

    // floor from calibration responses at steps 0..=t
    let mut total = 0.0;
    let mut count = 0.0;
    for row in &p.cal_y {
        for s in 0..=t {
            total += row[s].abs();
            count += 1.0;
        }
    }
    let eps = 1e-12 * (1.0 + total / count);

    // all N + 1 residual rows, test series last
    let mut res: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        res.push((0..p.cal_y[i].len()).map(|s| p.cal_y[i][s] - p.cal_hat[i][s]).collect());
    }
    res.push((0..p.test_y[j].len()).map(|s| p.test_y[j][s] - p.test_hat[j][s]).collect());

    let mut m = vec![1.0; n1];
    match method {
        Method::Split => {}
        Method::CptdMad if t > 0 => {
            for i in 0..n1 {
                let mut sum = 0.0;
                for s in 0..t {
                    sum += res[i][s].abs();
                }
                m[i] = (sum / t as f64).max(eps);
            }
        }
        Method::CptdRat if t > 0 => {
            let mut medians = Vec::new();
            for s in 0..t {
                let mut col: Vec<f64> = (0..n1).map(|i| res[i][s].abs()).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = if n1 % 2 == 1 { col[n1 / 2] } else { (col[n1 / 2 - 1] + col[n1 / 2]) / 2.0 };
                medians.push(med.max(eps));
            }
            let mut nr = vec![0.0; n1];
            for i in 0..n1 {
                let mut sum = 0.0;
                for s in 0..t {
                    sum += res[i][s].abs() / medians[s];
                }
                nr[i] = sum / t as f64;
            }
            let mut sorted_nr = nr.clone();
            sorted_nr.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for i in 0..n1 {
                // q̂ (N+1) = ((N+1)/2 + Σ_s #{≤}) / (t + 1), kept as a fraction
                let mut le_total: u64 = 0;
                for s in 0..t {
                    let r = res[i][s].abs();
                    le_total += (0..n1).filter(|&k| res[k][s].abs() <= r).count() as u64;
                }
                let num = n1 as u64 + 2 * le_total;
                let den = 2 * (t as u64 + 1);
                let rank = num.div_ceil(den).max(1) as usize;
                m[i] = sorted_nr[rank - 1].max(eps);
            }
        }
        Method::LaSplit => {
            let floor = p.scale_floor.max(eps);
            for i in 0..n {
                m[i] = p.cal_scale[i][t].max(floor);
            }
            m[n] = p.test_scale[j][t].max(floor);
        }
        _ => {}
    }

    let mut scores: Vec<f64> = (0..n).map(|i| res[i][t].abs() / m[i]).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((100 - p.alpha_pct) * n1 as u64).div_ceil(100) as usize;
    let w = if k > n { f64::INFINITY } else { scores[k - 1] };
    (p.test_hat[j][t], w * m[n])
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

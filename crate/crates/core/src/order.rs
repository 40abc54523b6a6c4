//! Order statistics shared by the calibration and metrics code.
//!
//! All selections sort by value with [`f64::total_cmp`]; ties are resolved by
//! the original index, which leaves the selected *value* independent of the
//! input order.

use std::cmp::Ordering;

/// Relative slack used when rounding `x` up to an integer rank.
///
/// Products such as `(1 - 0.3) * 10` land one ulp below or above the exact
/// integer; snapping keeps `⌈·⌉` on the exact-arithmetic answer.
const RANK_SNAP: f64 = 1e-9;

/// `⌈x⌉` for a non-negative rank expression, snapping float noise around
/// integers to the integer itself.
pub fn ceil_rank(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= RANK_SNAP * nearest.abs().max(1.0) {
        nearest.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Indices of `values` sorted ascending by value, ties by index.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Sorted copy of `values`.
pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// The `k`-th smallest element (1-based). Panics if `k` is out of range.
pub fn kth_smallest(values: &[f64], k: usize) -> f64 {
    assert!(k >= 1 && k <= values.len(), "rank {k} out of 1..={}", values.len());
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    median_of_sorted(&sorted(values))
}

pub fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Number of elements of an ascending slice that are `<= x`.
pub fn count_le(sorted: &[f64], x: f64) -> usize {
    sorted.partition_point(|v| v.total_cmp(&x) != Ordering::Greater)
}

/// Mean of `|v|` summed in ascending order, so the result does not depend on
/// the order of the input.
pub fn order_free_mean_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().map(|x| x.abs()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_rank_snaps_float_noise() {
        assert_eq!(ceil_rank((1.0 - 0.1) * 10.0), 9);
        assert_eq!(ceil_rank((1.0 - 0.3) * 10.0), 7);
        assert_eq!(ceil_rank(0.1 * 30.0), 3);
        assert_eq!(ceil_rank(1.5), 2);
        assert_eq!(ceil_rank(1.0000001), 2);
        assert_eq!(ceil_rank(0.0), 0);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[10.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn kth_and_counts() {
        let v = [5.0, 1.0, 4.0, 1.0];
        assert_eq!(kth_smallest(&v, 1), 1.0);
        assert_eq!(kth_smallest(&v, 3), 4.0);
        let s = sorted(&v);
        assert_eq!(count_le(&s, 1.0), 2);
        assert_eq!(count_le(&s, 0.5), 0);
        assert_eq!(count_le(&s, 9.0), 4);
        assert_eq!(argsort(&v), vec![1, 3, 2, 0]);
    }
}

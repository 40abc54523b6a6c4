use super::ConformalError;
use crate::order;

/// The `⌈(1-α)(N+1)⌉`-th smallest element of `scores ∪ {+∞}`.
///
/// Returns `+∞` exactly when the rank points past the `N` finite scores.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ConformalError::NonFiniteScore);
    }
    let n = scores.len();
    let k = order::ceil_rank((1.0 - alpha) * (n + 1) as f64).max(1);
    if k > n {
        return Ok(f64::INFINITY);
    }
    Ok(order::kth_smallest(scores, k))
}

//! Central finite-difference gradient checking.
//!
//! Every hand-written backward pass in this crate is validated against the
//! numeric gradient of its forward pass. The checker is deliberately
//! independent of the layer code: it only evaluates a scalar closure.

/// Central-difference step used across the crate's gradient checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Numeric gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let fp = f(&point);
        point[i] = orig - h;
        let fm = f(&point);
        point[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise discrepancy between an analytic and a numeric
/// gradient, scaled by `max(1, |a|, |n|)`. The floor of 1 makes the
/// measure absolute for small entries and relative for large ones; loss
/// values in this crate are O(1), so finite-difference noise sits around
/// 1e-10 on this scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

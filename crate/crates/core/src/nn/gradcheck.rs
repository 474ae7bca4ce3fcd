//! Finite-difference gradient checking.
//!
//! The oracle against which every hand-written backward pass is verified:
//! central differences `(f(x + h) - f(x - h)) / 2h` evaluated in `f64`,
//! where truncation error falls as `h²` and rounding error stays near
//! `ulp(f)/h`. With `h = 1e-5` both sit around `1e-10` for losses of order
//! one, far below the tolerances asserted by the layer and model checks.

/// Default step size for `f64` central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Magnitudes below this are treated as zero when forming relative errors.
pub const DEFAULT_ATOL: f64 = 1e-8;

/// Central finite-difference gradient of `f` at `point`.
///
/// Evaluates `f` twice per coordinate; `f` must be deterministic (same
/// output for the same input) or the estimate is meaningless.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "step size must be positive");
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    grad
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// Per coordinate: zero when both magnitudes sit below `atol` (noise floor),
/// otherwise `|a - n| / max(|a|, |n|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numeric.len()
    );
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() < atol && n.abs() < atol {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}

//! Central finite differences for checking analytic gradients.

use alloc::vec::Vec;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / scale
}

/// Central difference of `f` with respect to `x[i]`, restoring `x` afterwards.
pub fn central_difference(x: &mut [f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let plus = f(x);
    x[i] = orig - eps;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Numerical gradient of `f` at every coordinate listed in `indices`.
pub fn numeric_gradient(x: &mut [f64], indices: &[usize], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    indices
        .iter()
        .map(|&i| central_difference(x, i, eps, &mut f))
        .collect()
}

/// Largest relative error between analytic and numeric gradients at `indices`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], indices: &[usize], floor: f64) -> f64 {
    indices
        .iter()
        .zip(numeric)
        .map(|(&i, &n)| rel_error(analytic[i], n, floor))
        .fold(0.0, f64::max)
}

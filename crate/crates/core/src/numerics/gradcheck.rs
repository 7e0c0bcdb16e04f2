//! Central-difference gradient oracle.

use super::Matrix;
use crate::error::{LprError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of `f` at `at` by central differences, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(LprError::param(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LprError::Oracle(format!(
                "non-finite objective around coordinate {i}: f(x+h)={plus}, f(x-h)={minus}"
            )));
        }
        grad.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a − b| / max(1, |a|, |b|)`.
#[inline]
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest element-wise [`relative_error`] between two equally shaped matrices.
pub fn max_relative_error(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

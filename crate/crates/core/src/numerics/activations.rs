use super::Matrix;

/// Epsilon inside the RMS-norm square root.
pub const RMS_EPS: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx silu(x) = σ(x)(1 + x(1 − σ(x))).
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn rms_norm(x: &[f64]) -> Vec<f64> {
    let inv = inv_rms(x);
    x.iter().map(|v| v * inv).collect()
}

#[inline]
fn inv_rms(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

pub fn rms_norm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let inv = inv_rms(x.row(r));
        out.row_mut(r).iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Vector-Jacobian product of row-wise RMS-norm: given the input `x` and the
/// upstream gradient `g` w.r.t. the normalized output, returns the gradient
/// w.r.t. `x`.
pub fn rms_norm_rows_backward(x: &Matrix, g: &Matrix) -> Matrix {
    let d = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = g.row(r);
        let inv = inv_rms(xr);
        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let coef = xg * inv * inv * inv / d;
        for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(xr).zip(gr) {
            *o = gi * inv - xi * coef;
        }
    }
    out
}

/// Row-wise softmax with max-shift, so large scores never overflow.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = s.clone();
    for r in 0..s.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Vector-Jacobian product of row-wise softmax given its output `p`.
pub fn softmax_rows_backward(p: &Matrix, g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let gr = g.row(r);
        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in out.row_mut(r).iter_mut().zip(pr).zip(gr) {
            *o = pi * (gi - inner);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(50.0) - 50.0).abs() < 1e-12);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu(1.0) - expected).abs() < 1e-15);
        assert!((silu(1.0) - 0.731059).abs() < 1e-6);
        assert!(silu(-800.0).is_finite());
    }

    #[test]
    fn silu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn rms_norm_cases() {
        for v in rms_norm(&[1.0, 1.0, 1.0, 1.0]) {
            assert!((v - 1.0).abs() < 1e-6);
        }
        assert_eq!(rms_norm(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        let out = rms_norm(&[3.0, 4.0]);
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_rows(&Matrix::row_vector(&[0.0; 4]));
        assert!(p.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax_rows(&Matrix::row_vector(&[1000.0, 0.0]));
        assert!(p.is_finite());
        assert_eq!(p[(0, 0)], 1.0);
        assert!(p[(0, 1)] < 1e-300);

        let p = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p[(0, i)] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_backward_matches_central_difference() {
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![0.5, 0.1, -0.4]]);
        let g = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1]]);
        let analytic = rms_norm_rows_backward(&x, &g);
        let f = |m: &Matrix| rms_norm_rows(m).hadamard(&g).unwrap().sum();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((analytic[(r, c)] - fd).abs() < 1e-7);
            }
        }
    }
}

//! Similarity and divergence library used to score tokens against expert
//! prototypes.
//!
//! Every kind is exposed under one convention: a higher score means a more
//! similar pair. Divergences are negated, so routing always takes the
//! argmax of the score matrix.
//!
//! Geometric kinds (cosine, Gaussian kernel, multi-head dot) look only at
//! means. Mahalanobis uses the prototype's variance. The distributional
//! kinds (Wasserstein-2, KL, JS, Hellinger) compare full diagonal Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::numerics::{dot, norm, sq_dist, Matrix};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Norm below which cosine similarity is reported as a neutral 0.
const COSINE_DEGENERATE: f64 = 1e-12;

#[inline]
fn clamp_log_var(lv: f64) -> f64 {
    lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// d clamp(lv) / d lv: 1 inside the clamp window, 0 where it saturates.
#[inline]
fn clamp_mask(lv: f64) -> f64 {
    if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv) {
        1.0
    } else {
        0.0
    }
}

/// Diagonal Gaussian with log-variances clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(LprError::shape(
                "DiagGaussian::new",
                (1, mean.len()),
                (1, log_var.len()),
            ));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn from_variance(mean: Vec<f64>, var: &[f64]) -> Result<Self> {
        Self::new(mean, var.iter().map(|v| v.ln()).collect())
    }

    /// A point mass, represented at the variance floor.
    pub fn point(mean: Vec<f64>) -> Self {
        let n = mean.len();
        DiagGaussian {
            mean,
            log_var: vec![LOG_VAR_MIN; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricKind {
    Cosine,
    GaussianKernel { sigma: f64 },
    MultiHeadDot { heads: usize },
    Mahalanobis,
    Wasserstein2,
    Kl,
    Js,
    Hellinger,
}

impl MetricKind {
    /// Every kind, with the default parameters used by ablation grids.
    pub fn all() -> [MetricKind; 8] {
        [
            MetricKind::Cosine,
            MetricKind::GaussianKernel { sigma: 1.0 },
            MetricKind::MultiHeadDot { heads: 4 },
            MetricKind::Mahalanobis,
            MetricKind::Wasserstein2,
            MetricKind::Kl,
            MetricKind::Js,
            MetricKind::Hellinger,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::GaussianKernel { .. } => "gaussian_kernel",
            MetricKind::MultiHeadDot { .. } => "multi_head_dot",
            MetricKind::Mahalanobis => "mahalanobis",
            MetricKind::Wasserstein2 => "wasserstein2",
            MetricKind::Kl => "kl",
            MetricKind::Js => "js",
            MetricKind::Hellinger => "hellinger",
        }
    }

    /// Compares full token and prototype distributions rather than points.
    pub fn is_distributional(&self) -> bool {
        matches!(
            self,
            MetricKind::Wasserstein2 | MetricKind::Kl | MetricKind::Js | MetricKind::Hellinger
        )
    }

    /// Reads the prototype log-variances, which then become trainable.
    pub fn uses_prototype_variance(&self) -> bool {
        self.is_distributional() || matches!(self, MetricKind::Mahalanobis)
    }

    pub fn validate(&self, d_latent: usize) -> Result<()> {
        match *self {
            MetricKind::GaussianKernel { sigma } if !(sigma > 0.0) => Err(LprError::param(
                format!("gaussian kernel sigma must be > 0, got {sigma}"),
            )),
            MetricKind::MultiHeadDot { heads } if heads == 0 || !d_latent.is_multiple_of(heads) => {
                Err(LprError::param(format!(
                    "head count {heads} must divide latent dimension {d_latent}"
                )))
            }
            _ => Ok(()),
        }
    }
}

pub fn cosine_sim(z: &[f64], p: &[f64]) -> f64 {
    let (nz, np) = (norm(z), norm(p));
    if nz < COSINE_DEGENERATE || np < COSINE_DEGENERATE {
        return 0.0;
    }
    (dot(z, p) / (nz * np)).clamp(-1.0, 1.0)
}

pub fn gaussian_kernel_sim(z: &[f64], p: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(LprError::param(format!(
            "gaussian kernel sigma must be > 0, got {sigma}"
        )));
    }
    Ok((-sq_dist(z, p) / (2.0 * sigma * sigma)).exp())
}

/// Mean over heads of the scaled per-head dot product; head `h` owns the
/// `h`-th contiguous block of `d / heads` coordinates.
pub fn multihead_dot_sim(q: &[f64], k: &[f64], heads: usize) -> Result<f64> {
    let d = q.len();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(LprError::param(format!(
            "head count {heads} must divide vector length {d}"
        )));
    }
    let dh = d / heads;
    let scale = (dh as f64).sqrt();
    let total: f64 = q
        .chunks_exact(dh)
        .zip(k.chunks_exact(dh))
        .map(|(qh, kh)| dot(qh, kh) / scale)
        .sum();
    Ok(total / heads as f64)
}

/// Negated Mahalanobis distance under the prototype's diagonal covariance.
pub fn mahalanobis_sim(z: &[f64], p: &DiagGaussian) -> f64 {
    -z.iter()
        .zip(&p.mean)
        .zip(&p.log_var)
        .map(|((zi, mi), lv)| (zi - mi).powi(2) / lv.exp())
        .sum::<f64>()
        .sqrt()
}

fn check_dims(op: &'static str, a: &DiagGaussian, b: &DiagGaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(LprError::shape(op, (1, a.dim()), (1, b.dim())));
    }
    Ok(())
}

pub fn wasserstein2_sq(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dims("wasserstein2_sq", a, b)?;
    Ok(w2_value(&a.mean, &a.log_var, &b.mean, &b.log_var))
}

/// KL(a ‖ b).
pub fn kl_div(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dims("kl_div", a, b)?;
    Ok(kl_value(&a.mean, &a.log_var, &b.mean, &b.log_var))
}

/// Jensen-Shannon divergence under the Gaussian-midpoint approximation:
/// per dimension the mixture is replaced by N(μ₀, σ₀²) with
/// μ₀ = (μ₁+μ₂)/2 and σ₀² = (σ₁²+σ₂²)/2, then summed over dimensions.
pub fn js_div(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dims("js_div", a, b)?;
    Ok(js_value(&a.mean, &a.log_var, &b.mean, &b.log_var))
}

/// Hellinger distance `sqrt(1 − Π_d BC_d)` with the per-dimension
/// Bhattacharyya coefficients of the two diagonal Gaussians. Lies in [0, 1].
pub fn hellinger(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    check_dims("hellinger", a, b)?;
    Ok(hellinger_value(&a.mean, &a.log_var, &b.mean, &b.log_var))
}

fn w2_value(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let s1 = (clamp_log_var(l1[d]) * 0.5).exp();
        let s2 = (clamp_log_var(l2[d]) * 0.5).exp();
        acc += (m1[d] - m2[d]).powi(2) + (s1 - s2).powi(2);
    }
    acc
}

fn kl_value(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let (lv1, lv2) = (clamp_log_var(l1[d]), clamp_log_var(l2[d]));
        let (v1, v2) = (lv1.exp(), lv2.exp());
        acc += lv2 - lv1 + (v1 + (m1[d] - m2[d]).powi(2)) / v2 - 1.0;
    }
    0.5 * acc
}

fn js_value(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    // With the midpoint substitution the per-dimension expression reduces to
    // ¼ (2 ln(S/2) − ln σ₁² − ln σ₂² + Δ²/S), S = σ₁² + σ₂², and
    // 2 ln(S/2) − ln σ₁² − ln σ₂² = 2 ln cosh((ln σ₁² − ln σ₂²)/2).
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let (lv1, lv2) = (clamp_log_var(l1[d]), clamp_log_var(l2[d]));
        let s = lv1.exp() + lv2.exp();
        acc += 2.0 * (0.5 * (lv1 - lv2)).cosh().ln() + (m1[d] - m2[d]).powi(2) / s;
    }
    0.25 * acc
}

/// Σ_d ln BC_d, using ln(2σ₁σ₂/(σ₁²+σ₂²)) = −ln cosh((ln σ₁² − ln σ₂²)/2).
fn log_bhattacharyya(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for d in 0..m1.len() {
        let (lv1, lv2) = (clamp_log_var(l1[d]), clamp_log_var(l2[d]));
        let s = lv1.exp() + lv2.exp();
        acc -= 0.5 * (0.5 * (lv1 - lv2)).cosh().ln() + 0.25 * (m1[d] - m2[d]).powi(2) / s;
    }
    acc
}

fn hellinger_value(m1: &[f64], l1: &[f64], m2: &[f64], l2: &[f64]) -> f64 {
    (-log_bhattacharyya(m1, l1, m2, l2).exp_m1())
        .max(0.0)
        .sqrt()
}

/// Row-wise view of a batch of diagonal Gaussians. Log-variances are raw;
/// clamping happens inside the metric kernels so that gradients can be
/// masked where the clamp saturates.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRows<'a> {
    pub mean: &'a Matrix,
    pub log_var: &'a Matrix,
}

impl<'a> GaussianRows<'a> {
    pub fn new(mean: &'a Matrix, log_var: &'a Matrix) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(LprError::shape(
                "GaussianRows",
                mean.shape(),
                log_var.shape(),
            ));
        }
        Ok(GaussianRows { mean, log_var })
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }
}

/// Gradients of `Σ upstream ⊙ scores` with respect to both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrads {
    pub token_mean: Matrix,
    pub token_log_var: Matrix,
    pub proto_mean: Matrix,
    pub proto_log_var: Matrix,
}

fn pair_score(kind: MetricKind, z: &[f64], lz: &[f64], p: &[f64], lp: &[f64]) -> f64 {
    match kind {
        MetricKind::Cosine => cosine_sim(z, p),
        MetricKind::GaussianKernel { sigma } => (-sq_dist(z, p) / (2.0 * sigma * sigma)).exp(),
        MetricKind::MultiHeadDot { heads } => {
            let dh = z.len() / heads;
            dot(z, p) / (heads as f64 * (dh as f64).sqrt())
        }
        MetricKind::Mahalanobis => -mahalanobis_sq(z, p, lp).sqrt(),
        MetricKind::Wasserstein2 => -w2_value(z, lz, p, lp),
        MetricKind::Kl => -kl_value(z, lz, p, lp),
        MetricKind::Js => -js_value(z, lz, p, lp),
        MetricKind::Hellinger => -hellinger_value(z, lz, p, lp),
    }
}

fn mahalanobis_sq(z: &[f64], p: &[f64], lp: &[f64]) -> f64 {
    z.iter()
        .zip(p)
        .zip(lp)
        .map(|((zi, pi), lv)| (zi - pi).powi(2) / clamp_log_var(*lv).exp())
        .sum()
}

/// Slices receiving accumulated gradients for one (token, prototype) pair.
struct PairGrad<'a> {
    z: &'a mut [f64],
    lz: &'a mut [f64],
    p: &'a mut [f64],
    lp: &'a mut [f64],
}

fn pair_backward(
    kind: MetricKind,
    g: f64,
    z: &[f64],
    lz: &[f64],
    p: &[f64],
    lp: &[f64],
    out: PairGrad<'_>,
) {
    let n = z.len();
    match kind {
        MetricKind::Cosine => {
            let (nz, np) = (norm(z), norm(p));
            if nz < COSINE_DEGENERATE || np < COSINE_DEGENERATE {
                return;
            }
            let s = dot(z, p) / (nz * np);
            for d in 0..n {
                out.z[d] += g * (p[d] / (nz * np) - s * z[d] / (nz * nz));
                out.p[d] += g * (z[d] / (nz * np) - s * p[d] / (np * np));
            }
        }
        MetricKind::GaussianKernel { sigma } => {
            let s2 = sigma * sigma;
            let s = (-sq_dist(z, p) / (2.0 * s2)).exp();
            for d in 0..n {
                let t = g * s * (z[d] - p[d]) / s2;
                out.z[d] -= t;
                out.p[d] += t;
            }
        }
        MetricKind::MultiHeadDot { heads } => {
            let c = g / (heads as f64 * ((n / heads) as f64).sqrt());
            for d in 0..n {
                out.z[d] += c * p[d];
                out.p[d] += c * z[d];
            }
        }
        MetricKind::Mahalanobis => {
            let dist = mahalanobis_sq(z, p, lp).sqrt();
            if dist == 0.0 {
                return;
            }
            for d in 0..n {
                let v = clamp_log_var(lp[d]).exp();
                let diff = z[d] - p[d];
                let t = g * diff / (v * dist);
                out.z[d] -= t;
                out.p[d] += t;
                out.lp[d] += g * clamp_mask(lp[d]) * diff * diff / (2.0 * v * dist);
            }
        }
        MetricKind::Wasserstein2 => {
            for d in 0..n {
                let s1 = (clamp_log_var(lz[d]) * 0.5).exp();
                let s2 = (clamp_log_var(lp[d]) * 0.5).exp();
                let diff = z[d] - p[d];
                out.z[d] -= 2.0 * g * diff;
                out.p[d] += 2.0 * g * diff;
                out.lz[d] -= g * clamp_mask(lz[d]) * (s1 - s2) * s1;
                out.lp[d] += g * clamp_mask(lp[d]) * (s1 - s2) * s2;
            }
        }
        MetricKind::Kl => {
            for d in 0..n {
                let v1 = clamp_log_var(lz[d]).exp();
                let v2 = clamp_log_var(lp[d]).exp();
                let diff = z[d] - p[d];
                out.z[d] -= g * diff / v2;
                out.p[d] += g * diff / v2;
                out.lz[d] -= g * clamp_mask(lz[d]) * 0.5 * (v1 / v2 - 1.0);
                out.lp[d] -= g * clamp_mask(lp[d]) * 0.5 * (1.0 - (v1 + diff * diff) / v2);
            }
        }
        MetricKind::Js => {
            for d in 0..n {
                let v1 = clamp_log_var(lz[d]).exp();
                let v2 = clamp_log_var(lp[d]).exp();
                let s = v1 + v2;
                let diff = z[d] - p[d];
                let dm = diff / (2.0 * s);
                out.z[d] -= g * dm;
                out.p[d] += g * dm;
                let dl = |v: f64| 0.25 * (2.0 * v / s - 1.0 - diff * diff * v / (s * s));
                out.lz[d] -= g * clamp_mask(lz[d]) * dl(v1);
                out.lp[d] -= g * clamp_mask(lp[d]) * dl(v2);
            }
        }
        MetricKind::Hellinger => {
            let log_b = log_bhattacharyya(z, lz, p, lp);
            let b = log_b.exp();
            let h = (-log_b.exp_m1()).max(0.0).sqrt();
            if h < 1e-12 {
                return;
            }
            // score = −H, dH = −(B / 2H) d log B.
            let c = g * b / (2.0 * h);
            for d in 0..n {
                let v1 = clamp_log_var(lz[d]).exp();
                let v2 = clamp_log_var(lp[d]).exp();
                let s = v1 + v2;
                let diff = z[d] - p[d];
                let dm = -diff / (2.0 * s);
                out.z[d] += c * dm;
                out.p[d] -= c * dm;
                let dl = |v: f64| 0.5 * (0.5 - v / s) + diff * diff * v / (4.0 * s * s);
                out.lz[d] += c * clamp_mask(lz[d]) * dl(v1);
                out.lp[d] += c * clamp_mask(lp[d]) * dl(v2);
            }
        }
    }
}

fn check_rows(kind: MetricKind, tokens: GaussianRows<'_>, protos: GaussianRows<'_>) -> Result<()> {
    if tokens.dim() != protos.dim() {
        return Err(LprError::shape(
            "score_matrix",
            tokens.mean.shape(),
            protos.mean.shape(),
        ));
    }
    kind.validate(tokens.dim())
}

/// `(B x M)` score matrix between token rows and prototype rows.
pub fn score_rows(
    tokens: GaussianRows<'_>,
    protos: GaussianRows<'_>,
    kind: MetricKind,
) -> Result<Matrix> {
    check_rows(kind, tokens, protos)?;
    let mut out = Matrix::zeros(tokens.len(), protos.len());
    for t in 0..tokens.len() {
        let (z, lz) = (tokens.mean.row(t), tokens.log_var.row(t));
        for e in 0..protos.len() {
            out[(t, e)] = pair_score(kind, z, lz, protos.mean.row(e), protos.log_var.row(e));
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`score_rows`].
pub fn score_rows_backward(
    tokens: GaussianRows<'_>,
    protos: GaussianRows<'_>,
    kind: MetricKind,
    upstream: &Matrix,
) -> Result<ScoreGrads> {
    check_rows(kind, tokens, protos)?;
    if upstream.shape() != (tokens.len(), protos.len()) {
        return Err(LprError::shape(
            "score_rows_backward",
            upstream.shape(),
            (tokens.len(), protos.len()),
        ));
    }
    let (b, m, d) = (tokens.len(), protos.len(), tokens.dim());
    let mut grads = ScoreGrads {
        token_mean: Matrix::zeros(b, d),
        token_log_var: Matrix::zeros(b, d),
        proto_mean: Matrix::zeros(m, d),
        proto_log_var: Matrix::zeros(m, d),
    };
    for t in 0..b {
        let (z, lz) = (tokens.mean.row(t), tokens.log_var.row(t));
        for e in 0..m {
            let g = upstream[(t, e)];
            if g == 0.0 {
                continue;
            }
            // Split borrows: each accumulator lives in a different matrix.
            let ScoreGrads {
                token_mean,
                token_log_var,
                proto_mean,
                proto_log_var,
            } = &mut grads;
            pair_backward(
                kind,
                g,
                z,
                lz,
                protos.mean.row(e),
                protos.log_var.row(e),
                PairGrad {
                    z: token_mean.row_mut(t),
                    lz: token_log_var.row_mut(t),
                    p: proto_mean.row_mut(e),
                    lp: proto_log_var.row_mut(e),
                },
            );
        }
    }
    Ok(grads)
}

fn stack(gs: &[DiagGaussian], dim: usize) -> (Matrix, Matrix) {
    let mut mean = Matrix::zeros(gs.len(), dim);
    let mut log_var = Matrix::zeros(gs.len(), dim);
    for (i, g) in gs.iter().enumerate() {
        mean.row_mut(i).copy_from_slice(&g.mean);
        log_var.row_mut(i).copy_from_slice(&g.log_var);
    }
    (mean, log_var)
}

/// Scores every token against every prototype.
pub fn score_matrix(
    tokens: &[DiagGaussian],
    prototypes: &[DiagGaussian],
    kind: MetricKind,
) -> Result<Matrix> {
    let dim = tokens
        .first()
        .or(prototypes.first())
        .map_or(0, DiagGaussian::dim);
    for g in tokens.iter().chain(prototypes) {
        if g.dim() != dim {
            return Err(LprError::shape("score_matrix", (1, dim), (1, g.dim())));
        }
    }
    let (tm, tl) = stack(tokens, dim);
    let (pm, pl) = stack(prototypes, dim);
    score_rows(
        GaussianRows::new(&tm, &tl)?,
        GaussianRows::new(&pm, &pl)?,
        kind,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, sample_gaussian, RngState};

    fn g(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::from_variance(mean.to_vec(), var).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn gaussian_kernel_cases() {
        assert_eq!(
            gaussian_kernel_sim(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(),
            1.0
        );
        // ‖z − p‖² = 2σ² with σ = 1.5.
        let sigma = 1.5;
        let p = [2.0 * sigma * sigma].map(f64::sqrt);
        let v = gaussian_kernel_sim(&[0.0], &p, sigma).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-12);
        let mut last = 1.0;
        for k in 1..20 {
            let v = gaussian_kernel_sim(&[0.0], &[k as f64], 1.0).unwrap();
            assert!(v < last && v > 0.0 || v == 0.0);
            last = v;
        }
        assert!(gaussian_kernel_sim(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn multihead_cases() {
        let q = [0.3, -1.0, 2.0, 0.5];
        let k = [1.0, 0.2, -0.4, 0.9];
        let single = multihead_dot_sim(&q, &k, 1).unwrap();
        assert!((single - dot(&q, &k) / 2.0).abs() < 1e-15);
        let ones = [1.0; 4];
        assert!((multihead_dot_sim(&ones, &ones, 2).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(multihead_dot_sim(&[0.0; 4], &k, 2).unwrap(), 0.0);
        assert!(multihead_dot_sim(&q, &k, 3).is_err());
    }

    #[test]
    fn mahalanobis_cases() {
        let p = g(&[1.0, 2.0], &[9.0, 16.0]);
        assert_eq!(mahalanobis_sim(&[1.0, 2.0], &p), 0.0);
        let v = mahalanobis_sim(&[4.0, 6.0], &p);
        assert!((v + 2f64.sqrt()).abs() < 1e-12);
        let unit = g(&[0.0, 0.0], &[1.0, 1.0]);
        assert!((mahalanobis_sim(&[3.0, 4.0], &unit) + 5.0).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_cases() {
        let a = g(&[0.0], &[2.0]);
        assert_eq!(wasserstein2_sq(&a, &a).unwrap(), 0.0);
        let b = g(&[3.0], &[2.0]);
        assert!((wasserstein2_sq(&a, &b).unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(
            wasserstein2_sq(&a, &b).unwrap(),
            wasserstein2_sq(&b, &a).unwrap()
        );
    }

    #[test]
    fn kl_cases() {
        let a = g(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(kl_div(&a, &a).unwrap(), 0.0);
        let one = kl_div(&g(&[0.0], &[1.0]), &g(&[1.0], &[1.0])).unwrap();
        assert!((one - 0.5).abs() < 1e-12);
        let c = g(&[0.5], &[0.3]);
        let d = g(&[-1.0], &[2.5]);
        assert!((kl_div(&c, &d).unwrap() - kl_div(&d, &c).unwrap()).abs() > 1e-3);
    }

    /// Literal per-dimension JS expression with the midpoint parameters.
    fn js_literal(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        let m0 = 0.5 * (m1 + m2);
        let v0 = 0.5 * (v1 + v2);
        0.25 * (((v1 + v2).powi(2) / (4.0 * v1 * v2)).ln()
            + (v1 + (m1 - m0).powi(2)) / v0
            + (v2 + (m2 - m0).powi(2)) / v0
            - 2.0)
    }

    #[test]
    fn js_cases() {
        let a = g(&[0.0], &[1.0]);
        let b = g(&[2.0], &[1.0]);
        assert!(js_div(&a, &a).unwrap().abs() < 1e-15);
        assert!((js_div(&a, &b).unwrap() - js_div(&b, &a).unwrap()).abs() < 1e-15);
        let expected = js_literal(0.0, 1.0, 2.0, 1.0);
        assert!((js_div(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5).abs() < 1e-12);

        let c = g(&[0.3, -1.0], &[0.4, 2.0]);
        let d = g(&[1.1, 0.5], &[3.0, 0.7]);
        let literal = js_literal(0.3, 0.4, 1.1, 3.0) + js_literal(-1.0, 2.0, 0.5, 0.7);
        assert!((js_div(&c, &d).unwrap() - literal).abs() < 1e-12);
    }

    /// Bhattacharyya coefficient of two 1-D Gaussians by trapezoid quadrature.
    fn bc_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
        let pdf = |x: f64, m: f64, v: f64| {
            (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        };
        let (lo, hi) = (-40.0, 40.0);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (pdf(x, m1, v1) * pdf(x, m2, v2)).sqrt()
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn hellinger_cases() {
        let a = g(&[0.0], &[1.0]);
        let b = g(&[2.0], &[1.0]);
        assert_eq!(hellinger(&a, &a).unwrap(), 0.0);
        let oracle = (1.0 - bc_quadrature(0.0, 1.0, 2.0, 1.0)).sqrt();
        assert!((hellinger(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert!((hellinger(&a, &b).unwrap() - (1.0 - (-0.5f64).exp()).sqrt()).abs() < 1e-12);

        let c = g(&[0.2], &[0.5]);
        let d = g(&[-0.7], &[2.2]);
        let oracle = (1.0 - bc_quadrature(0.2, 0.5, -0.7, 2.2)).sqrt();
        assert!((hellinger(&c, &d).unwrap() - oracle).abs() < 1e-9);
        assert_eq!(hellinger(&c, &d).unwrap(), hellinger(&d, &c).unwrap());

        let mut last = 0.0;
        for gap in 1..40 {
            let v = hellinger(&a, &g(&[gap as f64 * 0.5], &[1.0])).unwrap();
            assert!(v >= last && v <= 1.0);
            last = v;
        }
        assert!(last > 1.0 - 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = g(&[0.0], &[1.0]);
        let b = g(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(kl_div(&a, &b), Err(LprError::Shape { .. })));
        assert!(matches!(
            score_matrix(&[a], &[b], MetricKind::Cosine),
            Err(LprError::Shape { .. })
        ));
    }

    #[test]
    fn log_var_is_clamped() {
        let a = DiagGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(a.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn score_matrix_patterns() {
        let rows: Vec<DiagGaussian> = (0..3)
            .map(|i| {
                let mut m = vec![0.0; 3];
                m[i] = 1.0;
                DiagGaussian::point(m)
            })
            .collect();
        let s = score_matrix(&rows, &rows, MetricKind::Cosine).unwrap();
        assert_eq!(s, Matrix::identity(3));

        let protos: Vec<DiagGaussian> = (0..4)
            .map(|i| g(&[i as f64, 0.5 * i as f64], &[1.0 + i as f64, 0.5]))
            .collect();
        for kind in [
            MetricKind::Wasserstein2,
            MetricKind::Kl,
            MetricKind::Js,
            MetricKind::Hellinger,
        ] {
            let s = score_matrix(&protos[2..3], &protos, kind).unwrap();
            let best = (0..4)
                .max_by(|&a, &b| s[(0, a)].total_cmp(&s[(0, b)]))
                .unwrap();
            assert_eq!(best, 2, "{kind:?}");
            assert!(s[(0, 2)].abs() < 1e-12);
        }
    }

    #[test]
    fn score_matrix_matches_pairwise_ops() {
        let mut rng = RngState::new(11);
        let gauss = |rng: &mut RngState| {
            let mean = (0..5).map(|_| rng.normal()).collect();
            let lv = (0..5).map(|_| 0.5 * rng.normal()).collect();
            DiagGaussian::new(mean, lv).unwrap()
        };
        let tokens: Vec<_> = (0..3).map(|_| gauss(&mut rng)).collect();
        let protos: Vec<_> = (0..4).map(|_| gauss(&mut rng)).collect();
        let s = score_matrix(&tokens, &protos, MetricKind::Wasserstein2).unwrap();
        for (t, a) in tokens.iter().enumerate() {
            for (e, b) in protos.iter().enumerate() {
                assert!((s[(t, e)] + wasserstein2_sq(a, b).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_backward_matches_finite_differences() {
        let mut rng = RngState::new(5);
        let tm = sample_gaussian(&mut rng, 3, 4);
        let tl = sample_gaussian(&mut rng, 3, 4).scale(0.4);
        let pm = sample_gaussian(&mut rng, 5, 4);
        let pl = sample_gaussian(&mut rng, 5, 4).scale(0.4);
        let up = sample_gaussian(&mut rng, 3, 5);
        let kinds = [
            MetricKind::Cosine,
            MetricKind::GaussianKernel { sigma: 1.3 },
            MetricKind::MultiHeadDot { heads: 2 },
            MetricKind::Mahalanobis,
            MetricKind::Wasserstein2,
            MetricKind::Kl,
            MetricKind::Js,
            MetricKind::Hellinger,
        ];
        for kind in kinds {
            let objective = |tm: &Matrix, tl: &Matrix, pm: &Matrix, pl: &Matrix| {
                let s = score_rows(
                    GaussianRows::new(tm, tl).unwrap(),
                    GaussianRows::new(pm, pl).unwrap(),
                    kind,
                )
                .unwrap();
                s.hadamard(&up).unwrap().sum()
            };
            let grads = score_rows_backward(
                GaussianRows::new(&tm, &tl).unwrap(),
                GaussianRows::new(&pm, &pl).unwrap(),
                kind,
                &up,
            )
            .unwrap();
            let h = 1e-5;
            let fd_tm = finite_diff_grad(|x| objective(x, &tl, &pm, &pl), &tm, h).unwrap();
            let fd_tl = finite_diff_grad(|x| objective(&tm, x, &pm, &pl), &tl, h).unwrap();
            let fd_pm = finite_diff_grad(|x| objective(&tm, &tl, x, &pl), &pm, h).unwrap();
            let fd_pl = finite_diff_grad(|x| objective(&tm, &tl, &pm, x), &pl, h).unwrap();
            assert!(
                max_relative_error(&grads.token_mean, &fd_tm) < 1e-6,
                "{kind:?} tm"
            );
            assert!(
                max_relative_error(&grads.token_log_var, &fd_tl) < 1e-6,
                "{kind:?} tl"
            );
            assert!(
                max_relative_error(&grads.proto_mean, &fd_pm) < 1e-6,
                "{kind:?} pm"
            );
            assert!(
                max_relative_error(&grads.proto_log_var, &fd_pl) < 1e-6,
                "{kind:?} pl"
            );
        }
    }
}

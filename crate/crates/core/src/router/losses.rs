//! The three router regularizers and their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::numerics::{dot, norm, Matrix};

use super::encoder::LatentGaussian;

/// Mean over tokens of KL(q(z|x) ‖ N(0, I)).
pub fn kl_loss(latent: &LatentGaussian) -> Result<f64> {
    kl_loss_grad(latent).map(|(v, _, _)| v)
}

/// KL loss with its gradients w.r.t. the posterior mean and log-variance.
pub fn kl_loss_grad(latent: &LatentGaussian) -> Result<(f64, Matrix, Matrix)> {
    let log_var = latent.log_var.as_ref().ok_or_else(|| {
        LprError::Contract("KL to the prior is undefined for point latents".into())
    })?;
    if log_var.shape() != latent.mean.shape() {
        return Err(LprError::shape(
            "kl_loss",
            latent.mean.shape(),
            log_var.shape(),
        ));
    }
    let tokens = latent.mean.rows();
    if tokens == 0 {
        return Ok((0.0, latent.mean.clone(), log_var.clone()));
    }
    let inv_t = 1.0 / tokens as f64;
    let mut total = 0.0;
    let mut d_mean = Matrix::zeros(tokens, latent.mean.cols());
    let mut d_lv = Matrix::zeros(tokens, latent.mean.cols());
    for (i, (&mu, &lv)) in latent
        .mean
        .as_slice()
        .iter()
        .zip(log_var.as_slice())
        .enumerate()
    {
        let var = lv.exp();
        total += 0.5 * (mu * mu + var - lv - 1.0);
        d_mean.as_mut_slice()[i] = mu * inv_t;
        d_lv.as_mut_slice()[i] = 0.5 * (var - 1.0) * inv_t;
    }
    Ok((total * inv_t, d_mean, d_lv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityKind {
    /// `‖U Uᵀ − I‖²_F` on the row-normalized target.
    Orthogonal,
    /// Mean positive pairwise cosine similarity.
    Cosine,
    /// Mean of `exp(−‖gᵢ − gⱼ‖²)` over pairs.
    Euclidean,
}

impl DiversityKind {
    pub fn name(self) -> &'static str {
        match self {
            DiversityKind::Orthogonal => "orthogonal",
            DiversityKind::Cosine => "cosine",
            DiversityKind::Euclidean => "euclidean",
        }
    }
}

/// What the diversity penalty is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityTarget {
    /// The `M x d` matrix of prototype means.
    Prototypes,
    /// The `B x d` matrix of encoded token means.
    Tokens,
    /// Sum of the two penalties.
    Both,
}

impl DiversityTarget {
    pub fn includes_prototypes(self) -> bool {
        matches!(self, DiversityTarget::Prototypes | DiversityTarget::Both)
    }

    pub fn includes_tokens(self) -> bool {
        matches!(self, DiversityTarget::Tokens | DiversityTarget::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            DiversityTarget::Prototypes => "prototypes",
            DiversityTarget::Tokens => "tokens",
            DiversityTarget::Both => "both",
        }
    }
}

pub fn diversity_loss(target: &Matrix, kind: DiversityKind) -> f64 {
    diversity_loss_grad(target, kind).0
}

pub fn diversity_loss_grad(target: &Matrix, kind: DiversityKind) -> (f64, Matrix) {
    let n = target.rows();
    let mut grad = Matrix::zeros(n, target.cols());
    if n < 2 {
        return (0.0, grad);
    }
    match kind {
        DiversityKind::Orthogonal => orthogonal_grad(target, grad),
        DiversityKind::Cosine => {
            let pairs = (n * (n - 1) / 2) as f64;
            let norms: Vec<f64> = target.row_iter().map(norm).collect();
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let (ni, nj) = (norms[i], norms[j]);
                    if ni < 1e-12 || nj < 1e-12 {
                        continue;
                    }
                    let (gi, gj) = (target.row(i), target.row(j));
                    let c = dot(gi, gj) / (ni * nj);
                    if c <= 0.0 {
                        continue;
                    }
                    total += c;
                    for d in 0..target.cols() {
                        grad[(i, d)] += (gj[d] / (ni * nj) - c * gi[d] / (ni * ni)) / pairs;
                        grad[(j, d)] += (gi[d] / (ni * nj) - c * gj[d] / (nj * nj)) / pairs;
                    }
                }
            }
            (total / pairs, grad)
        }
        DiversityKind::Euclidean => {
            let pairs = (n * (n - 1) / 2) as f64;
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let (gi, gj) = (target.row(i), target.row(j));
                    let e = (-crate::numerics::sq_dist(gi, gj)).exp();
                    total += e;
                    for d in 0..target.cols() {
                        let t = 2.0 * e * (gi[d] - gj[d]) / pairs;
                        grad[(i, d)] -= t;
                        grad[(j, d)] += t;
                    }
                }
            }
            (total / pairs, grad)
        }
    }
}

fn orthogonal_grad(target: &Matrix, mut grad: Matrix) -> (f64, Matrix) {
    let n = target.rows();
    let norms: Vec<f64> = target.row_iter().map(norm).collect();
    let unit = Matrix::from_fn(n, target.cols(), |r, c| {
        if norms[r] < 1e-12 {
            0.0
        } else {
            target[(r, c)] / norms[r]
        }
    });
    let mut residual = unit.matmul_t(&unit).expect("square gram");
    for i in 0..n {
        residual[(i, i)] -= 1.0;
    }
    let loss = residual.sum_sq();
    // d/dU ‖UUᵀ − I‖² = 4 (UUᵀ − I) U, then through u = g / ‖g‖.
    let d_unit = residual.matmul(&unit).expect("conforming").scale(4.0);
    for r in 0..n {
        if norms[r] < 1e-12 {
            continue;
        }
        let u = unit.row(r);
        let du = d_unit.row(r);
        let radial = dot(u, du);
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (du[c] - radial * u[c]) / norms[r];
        }
    }
    (loss, grad)
}

/// Mean over tokens of `‖z − P K_μ‖²`. The latents are treated as
/// constants; callers must not route this loss's gradient into the encoder.
pub fn alignment_loss(latents: &Matrix, probs: &Matrix, means: &Matrix) -> Result<f64> {
    alignment_loss_grad(latents, probs, means).map(|g| g.loss)
}

#[derive(Debug, Clone)]
pub struct AlignmentGrad {
    pub loss: f64,
    /// Gradient w.r.t. the routing probabilities.
    pub probs: Matrix,
    /// Gradient w.r.t. the prototype means through `P K_μ`.
    pub means: Matrix,
}

pub fn alignment_loss_grad(
    latents: &Matrix,
    probs: &Matrix,
    means: &Matrix,
) -> Result<AlignmentGrad> {
    if probs.rows() != latents.rows() || probs.cols() != means.rows() {
        return Err(LprError::shape(
            "alignment_loss",
            probs.shape(),
            means.shape(),
        ));
    }
    if latents.cols() != means.cols() {
        return Err(LprError::shape(
            "alignment_loss",
            latents.shape(),
            means.shape(),
        ));
    }
    let tokens = latents.rows();
    if tokens == 0 {
        return Ok(AlignmentGrad {
            loss: 0.0,
            probs: probs.clone(),
            means: Matrix::zeros(means.rows(), means.cols()),
        });
    }
    let aggregated = probs.matmul(means)?;
    let residual = aggregated.sub(latents)?;
    let loss = residual.sum_sq() / tokens as f64;
    let d_agg = residual.scale(2.0 / tokens as f64);
    Ok(AlignmentGrad {
        loss,
        probs: d_agg.matmul_t(means)?,
        means: probs.t_matmul(&d_agg)?,
    })
}

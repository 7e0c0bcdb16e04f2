//! Token encoder into the routing latent space:
//! `z = silu(rms_norm(x)) W₁ + b₁`, optionally with a second head producing
//! per-token log-variances for the reparameterized sample `z = μ + σ ⊙ ε`.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::metrics::{GaussianRows, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::numerics::{
    rms_norm_rows, rms_norm_rows_backward, sample_gaussian, silu, silu_grad, Matrix, RngState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Point latents; no log-variance head.
    Deterministic,
    /// Reparameterized sample around the predicted mean.
    Variational,
    /// Variational parameters, but `z = μ` with no sampling.
    VariationalEval,
}

impl EncoderMode {
    pub fn is_variational(self) -> bool {
        !matches!(self, EncoderMode::Deterministic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalHead {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_model x d_latent`
    pub w1: Matrix,
    /// `1 x d_latent`
    pub b1: Matrix,
    pub variational: Option<VariationalHead>,
}

impl EncoderParams {
    /// Gaussian weights with standard deviation `1/sqrt(d_model)`, zero
    /// biases. The log-variance head starts at zero so every token begins
    /// with unit posterior variance.
    pub fn init(
        rng: &mut RngState,
        d_model: usize,
        d_latent: usize,
        variational: bool,
    ) -> Result<Self> {
        if d_latent == 0 || d_latent > d_model {
            return Err(LprError::param(format!(
                "latent dimension {d_latent} must be in 1..={d_model}"
            )));
        }
        let scale = 1.0 / (d_model as f64).sqrt();
        let w1 = sample_gaussian(rng, d_model, d_latent).scale(scale);
        let variational = variational.then(|| VariationalHead {
            w: Matrix::zeros(d_model, d_latent),
            b: Matrix::zeros(1, d_latent),
        });
        Ok(EncoderParams {
            w1,
            b1: Matrix::zeros(1, d_latent),
            variational,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_latent(&self) -> usize {
        self.w1.cols()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            variational: self.variational.as_ref().map(|h| VariationalHead {
                w: Matrix::zeros(h.w.rows(), h.w.cols()),
                b: Matrix::zeros(1, h.b.cols()),
            }),
        }
    }
}

/// Per-token posterior. `log_var` is `None` for point latents.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Matrix,
    pub log_var: Option<Matrix>,
}

/// Encoder output plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub latent: LatentGaussian,
    /// Latents used for geometric scoring: the sample in variational mode,
    /// the mean otherwise.
    pub z: Matrix,
    pub mode: EncoderMode,
    normed: Matrix,
    activated: Matrix,
    raw_log_var: Option<Matrix>,
    noise: Option<Matrix>,
    /// Log-variance rows fed to the distributional metrics; `-inf` for
    /// point latents, which the metrics clamp to the variance floor.
    scoring_log_var: Matrix,
}

impl Encoded {
    /// Token side of the score matrix. Geometric kinds see the latent `z`;
    /// distributional kinds see the posterior `(μ, log σ²)`.
    pub fn scoring_rows(&self, distributional: bool) -> GaussianRows<'_> {
        let mean = if distributional {
            &self.latent.mean
        } else {
            &self.z
        };
        GaussianRows {
            mean,
            log_var: &self.scoring_log_var,
        }
    }

    pub fn noise(&self) -> Option<&Matrix> {
        self.noise.as_ref()
    }
}

/// Encodes `x`, drawing reparameterization noise from `rng` when the mode
/// samples.
pub fn encode(
    params: &EncoderParams,
    x: &Matrix,
    rng: &mut RngState,
    mode: EncoderMode,
) -> Result<Encoded> {
    let noise = (mode == EncoderMode::Variational)
        .then(|| sample_gaussian(rng, x.rows(), params.d_latent()));
    encode_with_noise(params, x, mode, noise)
}

/// Encodes `x` with caller-supplied noise (required in variational mode,
/// ignored otherwise).
pub fn encode_with_noise(
    params: &EncoderParams,
    x: &Matrix,
    mode: EncoderMode,
    noise: Option<Matrix>,
) -> Result<Encoded> {
    if x.cols() != params.d_model() {
        return Err(LprError::shape("encode", x.shape(), params.w1.shape()));
    }
    let normed = rms_norm_rows(x);
    let activated = normed.map(silu);
    let mut mean = activated.matmul(&params.w1)?;
    mean.add_row_broadcast(&params.b1)?;

    if !mode.is_variational() {
        let scoring_log_var = Matrix::filled(x.rows(), params.d_latent(), f64::NEG_INFINITY);
        return Ok(Encoded {
            z: mean.clone(),
            latent: LatentGaussian {
                mean,
                log_var: None,
            },
            mode,
            normed,
            activated,
            raw_log_var: None,
            noise: None,
            scoring_log_var,
        });
    }

    let head = params.variational.as_ref().ok_or_else(|| {
        LprError::Contract("variational encoding requires a log-variance head".into())
    })?;
    let mut raw = activated.matmul(&head.w)?;
    raw.add_row_broadcast(&head.b)?;
    let log_var = raw.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));

    let (z, noise) = match mode {
        EncoderMode::Variational => {
            let eps = noise.ok_or_else(|| {
                LprError::Contract("variational mode needs reparameterization noise".into())
            })?;
            if eps.shape() != mean.shape() {
                return Err(LprError::shape("encode noise", eps.shape(), mean.shape()));
            }
            let mut z = mean.clone();
            for ((zv, &lv), &e) in z
                .as_mut_slice()
                .iter_mut()
                .zip(log_var.as_slice())
                .zip(eps.as_slice())
            {
                *zv += (0.5 * lv).exp() * e;
            }
            (z, Some(eps))
        }
        _ => (mean.clone(), None),
    };

    Ok(Encoded {
        latent: LatentGaussian {
            mean,
            log_var: Some(log_var.clone()),
        },
        z,
        mode,
        normed,
        activated,
        raw_log_var: Some(raw),
        noise,
        scoring_log_var: log_var,
    })
}

/// Upstream gradients arriving at the encoder outputs.
#[derive(Debug, Clone)]
pub struct EncoderUpstream {
    pub mean: Matrix,
    /// Gradient w.r.t. the clamped log-variance.
    pub log_var: Matrix,
    pub z: Matrix,
}

impl EncoderUpstream {
    pub fn zeros(rows: usize, d_latent: usize) -> Self {
        EncoderUpstream {
            mean: Matrix::zeros(rows, d_latent),
            log_var: Matrix::zeros(rows, d_latent),
            z: Matrix::zeros(rows, d_latent),
        }
    }
}

/// Backpropagates through the encoder. Returns parameter gradients and the
/// gradient w.r.t. the input batch.
pub fn encoder_backward(
    params: &EncoderParams,
    x: &Matrix,
    enc: &Encoded,
    upstream: &EncoderUpstream,
) -> Result<(EncoderParams, Matrix)> {
    let mut grads = params.zeros_like();

    // z depends on μ directly and, when sampled, on log σ² through σ ⊙ ε.
    let d_mean = upstream.mean.add(&upstream.z)?;
    let mut d_act = Matrix::zeros(enc.activated.rows(), enc.activated.cols());

    if let (Some(head), Some(raw)) = (params.variational.as_ref(), enc.raw_log_var.as_ref()) {
        let mut d_raw = upstream.log_var.clone();
        if let Some(eps) = enc.noise.as_ref() {
            let lv = enc.latent.log_var.as_ref().expect("variational latent");
            for (((d, &lv), &e), &dz) in d_raw
                .as_mut_slice()
                .iter_mut()
                .zip(lv.as_slice())
                .zip(eps.as_slice())
                .zip(upstream.z.as_slice())
            {
                *d += dz * 0.5 * (0.5 * lv).exp() * e;
            }
        }
        for (d, &r) in d_raw.as_mut_slice().iter_mut().zip(raw.as_slice()) {
            if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&r) {
                *d = 0.0;
            }
        }
        let g = grads.variational.as_mut().expect("matching head");
        g.w = enc.activated.t_matmul(&d_raw)?;
        g.b = d_raw.col_sums();
        d_act = d_raw.matmul_t(&head.w)?;
    } else if enc.mode.is_variational() {
        return Err(LprError::Contract(
            "encoder cache lacks a log-variance head".into(),
        ));
    }

    grads.w1 = enc.activated.t_matmul(&d_mean)?;
    grads.b1 = d_mean.col_sums();
    d_act.add_assign(&d_mean.matmul_t(&params.w1)?)?;

    let d_normed = Matrix::from_fn(d_act.rows(), d_act.cols(), |r, c| {
        d_act[(r, c)] * silu_grad(enc.normed[(r, c)])
    });
    let d_x = rms_norm_rows_backward(x, &d_normed);
    Ok((grads, d_x))
}

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::numerics::{sample_gaussian, silu, silu_grad, Matrix, RngState};

/// Two-layer SiLU feed-forward expert: `silu(x W_in + b_in) W_out + b_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertNet {
    /// `d_model x d_ff`
    pub w_in: Matrix,
    /// `1 x d_ff`
    pub b_in: Matrix,
    /// `d_ff x d_model`
    pub w_out: Matrix,
    /// `1 x d_model`
    pub b_out: Matrix,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    pub pre: Matrix,
    pub act: Matrix,
    pub out: Matrix,
}

impl ExpertNet {
    pub fn init(rng: &mut RngState, d_model: usize, d_ff: usize) -> Result<Self> {
        if d_model == 0 || d_ff == 0 {
            return Err(LprError::param(format!(
                "expert dims must be positive, got d_model={d_model}, d_ff={d_ff}"
            )));
        }
        Ok(ExpertNet {
            w_in: sample_gaussian(rng, d_model, d_ff).scale(1.0 / (d_model as f64).sqrt()),
            b_in: Matrix::zeros(1, d_ff),
            w_out: sample_gaussian(rng, d_ff, d_model).scale(1.0 / (d_ff as f64).sqrt()),
            b_out: Matrix::zeros(1, d_model),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ExpertNet {
            w_in: Matrix::zeros(self.w_in.rows(), self.w_in.cols()),
            b_in: Matrix::zeros(1, self.b_in.cols()),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: Matrix::zeros(1, self.b_out.cols()),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ExpertCache> {
        let mut pre = x.matmul(&self.w_in)?;
        pre.add_row_broadcast(&self.b_in)?;
        let act = pre.map(silu);
        let mut out = act.matmul(&self.w_out)?;
        out.add_row_broadcast(&self.b_out)?;
        Ok(ExpertCache { pre, act, out })
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub fn backward(
        &self,
        x: &Matrix,
        cache: &ExpertCache,
        d_out: &Matrix,
        grads: &mut ExpertNet,
    ) -> Result<Matrix> {
        grads.w_out.add_assign(&cache.act.t_matmul(d_out)?)?;
        grads.b_out.add_assign(&d_out.col_sums())?;
        let d_act = d_out.matmul_t(&self.w_out)?;
        let d_pre = d_act.hadamard(&cache.pre.map(silu_grad))?;
        grads.w_in.add_assign(&x.t_matmul(&d_pre)?)?;
        grads.b_in.add_assign(&d_pre.col_sums())?;
        d_pre.matmul_t(&self.w_in)
    }
}

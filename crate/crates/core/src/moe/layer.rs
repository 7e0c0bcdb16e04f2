use crate::error::{LprError, Result};
use crate::numerics::{softmax_rows_backward, Matrix};
use crate::router::RoutingDecision;

use super::expert::{ExpertCache, ExpertNet};

/// Tokens dispatched to one expert and the activations they produced.
#[derive(Debug, Clone)]
pub struct ExpertDispatch {
    /// `(token, slot)` pairs in row order of `input` and `cache.out`.
    pub slots: Vec<(usize, usize)>,
    pub input: Matrix,
    pub cache: ExpertCache,
}

#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `y_t = Σ_{i∈S_t} w_{t,i} E_i(x_t)`
    pub y: Matrix,
    pub dispatch: Vec<ExpertDispatch>,
}

/// Runs each selected expert on its tokens and mixes the outputs with the
/// gating weights.
pub fn moe_forward(
    experts: &[ExpertNet],
    decision: &RoutingDecision,
    x: &Matrix,
) -> Result<MoeOutput> {
    if experts.len() != decision.experts() {
        return Err(LprError::shape(
            "moe_forward",
            (experts.len(), 1),
            decision.probs.shape(),
        ));
    }
    if x.rows() != decision.tokens() {
        return Err(LprError::shape(
            "moe_forward",
            x.shape(),
            decision.probs.shape(),
        ));
    }
    let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); experts.len()];
    for t in 0..decision.tokens() {
        for (j, &e) in decision.selected(t).iter().enumerate() {
            slots[e].push((t, j));
        }
    }
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut dispatch = Vec::with_capacity(experts.len());
    for (expert, slots) in experts.iter().zip(slots) {
        let rows: Vec<Vec<f64>> = slots.iter().map(|&(t, _)| x.row(t).to_vec()).collect();
        let input = if rows.is_empty() {
            Matrix::zeros(0, x.cols())
        } else {
            Matrix::from_rows(&rows)
        };
        let cache = expert.forward(&input)?;
        for (r, &(t, j)) in slots.iter().enumerate() {
            let w = decision.topk_w[(t, j)];
            for (dst, &v) in y.row_mut(t).iter_mut().zip(cache.out.row(r)) {
                *dst += w * v;
            }
        }
        dispatch.push(ExpertDispatch {
            slots,
            input,
            cache,
        });
    }
    Ok(MoeOutput { y, dispatch })
}

/// Backward through [`moe_forward`]. Accumulates expert gradients and
/// returns `(∂/∂x, ∂/∂topk_w)`.
pub fn moe_backward(
    experts: &[ExpertNet],
    decision: &RoutingDecision,
    out: &MoeOutput,
    d_y: &Matrix,
    grads: &mut [ExpertNet],
) -> Result<(Matrix, Matrix)> {
    let mut d_x = Matrix::zeros(d_y.rows(), d_y.cols());
    let mut d_w = Matrix::zeros(decision.tokens(), decision.k);
    for ((expert, disp), g) in experts.iter().zip(&out.dispatch).zip(grads.iter_mut()) {
        if disp.slots.is_empty() {
            continue;
        }
        let mut d_out = Matrix::zeros(disp.slots.len(), d_y.cols());
        for (r, &(t, j)) in disp.slots.iter().enumerate() {
            let w = decision.topk_w[(t, j)];
            let dy = d_y.row(t);
            d_w[(t, j)] = dy
                .iter()
                .zip(disp.cache.out.row(r))
                .map(|(a, b)| a * b)
                .sum();
            for (dst, &v) in d_out.row_mut(r).iter_mut().zip(dy) {
                *dst = w * v;
            }
        }
        let d_in = expert.backward(&disp.input, &disp.cache, &d_out, g)?;
        for (r, &(t, _)) in disp.slots.iter().enumerate() {
            for (dst, &v) in d_x.row_mut(t).iter_mut().zip(d_in.row(r)) {
                *dst += v;
            }
        }
    }
    Ok((d_x, d_w))
}

/// Mean squared error over every element.
pub fn mse_loss(y: &Matrix, targets: &Matrix) -> Result<f64> {
    Ok(y.sub(targets)?.sum_sq() / y.len() as f64)
}

pub fn mse_loss_grad(y: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    let diff = y.sub(targets)?;
    let n = y.len() as f64;
    Ok((diff.sum_sq() / n, diff.scale(2.0 / n)))
}

/// Switch-style balance loss `M Σ_e f_e p̄_e`, where `f_e` is the fraction
/// of tokens with `e` in their top-k and `p̄_e` the mean routing
/// probability. Equals 1 at perfect balance with k = 1.
pub fn aux_balance_loss(decision: &RoutingDecision) -> f64 {
    aux_balance_loss_grad(decision).0
}

/// Loss and its gradient w.r.t. the scores. `f_e` is piecewise constant,
/// so only `p̄_e` carries gradient.
pub fn aux_balance_loss_grad(decision: &RoutingDecision) -> (f64, Matrix) {
    let (b, m) = decision.probs.shape();
    let mut f = vec![0.0; m];
    decision.topk_idx.iter().for_each(|&e| f[e] += 1.0);
    // Fractions are per token, so each row of top-k sums to k / k = 1.
    let scale = 1.0 / (b as f64 * decision.k as f64);
    f.iter_mut().for_each(|v| *v *= scale);
    let p_bar = decision.probs.col_sums().scale(1.0 / b as f64);
    let mf = m as f64;
    let loss = mf
        * f.iter()
            .zip(p_bar.as_slice())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    let d_probs = Matrix::from_fn(b, m, |_, e| mf * f[e] / b as f64);
    (loss, softmax_rows_backward(&decision.probs, &d_probs))
}

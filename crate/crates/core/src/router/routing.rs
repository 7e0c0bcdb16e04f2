//! Top-k gating over a score matrix.

use crate::error::{LprError, Result};
use crate::metrics::{score_rows, GaussianRows, MetricKind};
use crate::numerics::{softmax_rows, Matrix};

use super::prototypes::ExpertPrototypes;

/// Per-token expert selection.
///
/// `topk_w` rows are the softmax probabilities restricted to the selected
/// experts and renormalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub k: usize,
    /// Row-major `B x k` expert indices, best first.
    pub topk_idx: Vec<usize>,
    /// `B x k`
    pub topk_w: Matrix,
    /// `B x M`
    pub probs: Matrix,
    /// `B x M`
    pub scores: Matrix,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn selected(&self, token: usize) -> &[usize] {
        &self.topk_idx[token * self.k..(token + 1) * self.k]
    }

    pub fn weights(&self, token: usize) -> &[f64] {
        self.topk_w.row(token)
    }

    /// Whether `expert` is in `token`'s top-k set.
    pub fn contains(&self, token: usize, expert: usize) -> bool {
        self.selected(token).contains(&expert)
    }
}

/// Indices of the `k` largest entries, ties broken by the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

/// Softmax, top-k selection and renormalization for a raw score matrix.
///
/// Experts are ranked by score, which orders them exactly as the softmax
/// probabilities do without the ties that underflowed probabilities create.
pub fn route_from_scores(scores: Matrix, k: usize) -> Result<RoutingDecision> {
    let m = scores.cols();
    if k == 0 || k > m {
        return Err(LprError::param(format!(
            "top-k must satisfy 1 <= k <= M, got k={k}, M={m}"
        )));
    }
    if !scores.is_finite() {
        return Err(LprError::UndefinedInput("non-finite routing scores".into()));
    }
    let probs = softmax_rows(&scores);
    let b = scores.rows();
    let mut topk_idx = Vec::with_capacity(b * k);
    let mut topk_w = Matrix::zeros(b, k);
    for t in 0..b {
        let row = scores.row(t);
        let sel = top_k_indices(row, k);
        // Softmax over the selected scores equals renormalized probs.
        let top = row[sel[0]];
        let w = topk_w.row_mut(t);
        let mut total = 0.0;
        for (wi, &e) in w.iter_mut().zip(&sel) {
            *wi = (row[e] - top).exp();
            total += *wi;
        }
        w.iter_mut().for_each(|v| *v /= total);
        topk_idx.extend(sel);
    }
    Ok(RoutingDecision {
        k,
        topk_idx,
        topk_w,
        probs,
        scores,
    })
}

/// Scores tokens against prototypes with `kind` and takes the top-k.
pub fn route(
    tokens: GaussianRows<'_>,
    prototypes: &ExpertPrototypes,
    kind: MetricKind,
    k: usize,
) -> Result<RoutingDecision> {
    let scores = score_rows(tokens, prototypes.rows(), kind)?;
    route_from_scores(scores, k)
}

/// Linear router: scores are `x Wᵀ` with one key row per expert.
pub fn vanilla_route(x: &Matrix, keys: &Matrix, k: usize) -> Result<RoutingDecision> {
    let scores = x.matmul_t(keys)?;
    route_from_scores(scores, k)
}

/// Maps a gradient on the gating weights (`B x k`) to a gradient on the
/// full score matrix (`B x M`). Selection is treated as constant, so only
/// the selected experts' scores receive gradient.
pub fn gating_backward(decision: &RoutingDecision, d_weights: &Matrix) -> Result<Matrix> {
    if d_weights.shape() != decision.topk_w.shape() {
        return Err(LprError::shape(
            "gating_backward",
            d_weights.shape(),
            decision.topk_w.shape(),
        ));
    }
    let mut d_scores = Matrix::zeros(decision.tokens(), decision.experts());
    for t in 0..decision.tokens() {
        let w = decision.weights(t);
        let g = d_weights.row(t);
        let inner: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((&e, &wi), &gi) in decision.selected(t).iter().zip(w).zip(g) {
            d_scores[(t, e)] = wi * (gi - inner);
        }
    }
    Ok(d_scores)
}

use super::{sample_gaussian, RngState};

/// Empirical variance of the entries of `X Wᵀ` for `X` (`tokens × d`) and
/// `W` (`experts × d`) with i.i.d. standard-normal entries. Grows linearly
/// in `d`, which is why raw dot-product router logits get noisier with width.
pub fn score_variance(rng: &mut RngState, tokens: usize, experts: usize, d: usize) -> f64 {
    let x = sample_gaussian(rng, tokens, d);
    let w = sample_gaussian(rng, experts, d);
    let s = x.matmul_t(&w).expect("inner dimensions agree");
    let n = s.len() as f64;
    let mean = s.as_slice().iter().sum::<f64>() / n;
    s.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

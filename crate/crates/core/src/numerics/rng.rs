//! Seeded, platform-independent random streams.
//!
//! Backed by ChaCha8, whose output is specified bit-for-bit independent of
//! platform. Normals come from the ziggurat sampler in `rand_distr`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream keyed by `(seed, stream)`. Used to give each
    /// consumer (parameter init, batches, eval set, grid cell) its own
    /// sequence so that adding draws in one place never shifts another.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Draws an index with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // Rounding can leave u marginally above the last bucket.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

/// `rows x cols` matrix of i.i.d. standard normal draws.
pub fn sample_gaussian(rng: &mut RngState, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_a_million_draws() {
        let mut rng = RngState::new(7);
        let m = sample_gaussian(&mut rng, 1000, 1000);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = sample_gaussian(&mut RngState::new(42), 4, 5);
        let b = sample_gaussian(&mut RngState::new(42), 4, 5);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn different_seeds_differ() {
        let a = sample_gaussian(&mut RngState::new(1), 4, 5);
        let b = sample_gaussian(&mut RngState::new(2), 4, 5);
        assert_ne!(a, b);
    }

    #[test]
    fn derived_streams_are_independent_of_each_other() {
        let a = sample_gaussian(&mut RngState::derive(3, 0), 2, 3);
        let b = sample_gaussian(&mut RngState::derive(3, 1), 2, 3);
        assert_ne!(a, b);
        let again = sample_gaussian(&mut RngState::derive(3, 1), 2, 3);
        assert_eq!(b, again);
    }

    #[test]
    fn categorical_respects_zero_weights() {
        let mut rng = RngState::new(9);
        for _ in 0..1000 {
            assert_eq!(rng.categorical(&[0.0, 1.0, 0.0]), 1);
        }
    }
}

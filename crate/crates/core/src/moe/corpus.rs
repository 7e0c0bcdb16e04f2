//! Synthetic clustered regression data with Zipf-skewed cluster frequencies.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::numerics::{sample_gaussian, Matrix, RngState};

/// Knobs from which a [`SyntheticCorpusSpec`] is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_clusters: usize,
    /// Cluster `c` (1-based) has weight proportional to `c^-s`.
    pub zipf_exponent: f64,
    pub noise_std: f64,
    /// Standard deviation of each cluster-mean coordinate.
    pub mean_scale: f64,
    /// Standard deviation of a direction shared by every cluster mean.
    /// Hidden states of trained models are anisotropic in this way.
    pub shared_offset: f64,
    /// Spectral scale of the per-cluster target maps.
    pub target_scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_clusters: 16,
            zipf_exponent: 1.0,
            noise_std: 0.3,
            mean_scale: 1.0,
            shared_offset: 0.0,
            target_scale: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(LprError::param("corpus.n_clusters must be at least 1"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(LprError::param(
                "corpus.zipf_exponent must be finite and >= 0",
            ));
        }
        for (name, v) in [
            ("corpus.noise_std", self.noise_std),
            ("corpus.mean_scale", self.mean_scale),
            ("corpus.shared_offset", self.shared_offset),
            ("corpus.target_scale", self.target_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LprError::param(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Normalized Zipf weights `c^-s / Σ_j j^-s` for `c = 1..=n`.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|c| (c as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// A fully materialized corpus: tokens come from `x = mean_c + noise` with
/// `c ~ mixing_weights`, and regress onto `x A_c + b_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub d_model: usize,
    /// `n_clusters x d_model`
    pub cluster_means: Matrix,
    pub mixing_weights: Vec<f64>,
    pub noise_std: f64,
    /// One `d_model x d_model` map per cluster.
    pub target_maps: Vec<Matrix>,
    /// `n_clusters x d_model`
    pub target_bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B x d_model`
    pub x: Matrix,
    /// `B x d_model`
    pub targets: Matrix,
    pub labels: Vec<usize>,
}

impl SyntheticCorpusSpec {
    pub fn from_config(config: &CorpusConfig, d_model: usize, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        if d_model == 0 {
            return Err(LprError::param("d_model must be at least 1"));
        }
        let n = config.n_clusters;
        let mut cluster_means = sample_gaussian(rng, n, d_model).scale(config.mean_scale);
        let offset = sample_gaussian(rng, 1, d_model).scale(config.shared_offset);
        cluster_means.add_row_broadcast(&offset)?;
        let map_scale = config.target_scale / (d_model as f64).sqrt();
        let target_maps = (0..n)
            .map(|_| sample_gaussian(rng, d_model, d_model).scale(map_scale))
            .collect();
        let target_bias = sample_gaussian(rng, n, d_model).scale(config.mean_scale);
        Ok(SyntheticCorpusSpec {
            d_model,
            cluster_means,
            mixing_weights: zipf_weights(n, config.zipf_exponent),
            noise_std: config.noise_std,
            target_maps,
            target_bias,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_means.rows()
    }

    pub fn generate_batch(&self, rng: &mut RngState, batch: usize) -> Batch {
        let d = self.d_model;
        let mut x = Matrix::zeros(batch, d);
        let mut targets = Matrix::zeros(batch, d);
        let mut labels = Vec::with_capacity(batch);
        for t in 0..batch {
            let c = rng.categorical(&self.mixing_weights);
            labels.push(c);
            for (v, &m) in x.row_mut(t).iter_mut().zip(self.cluster_means.row(c)) {
                *v = m + self.noise_std * rng.normal();
            }
            let map = &self.target_maps[c];
            let xt = x.row(t);
            let out = targets.row_mut(t);
            out.copy_from_slice(self.target_bias.row(c));
            for (i, &xi) in xt.iter().enumerate() {
                for (o, &a) in out.iter_mut().zip(map.row(i)) {
                    *o += xi * a;
                }
            }
        }
        Batch { x, targets, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frequencies(spec: &SyntheticCorpusSpec, n: usize) -> Vec<f64> {
        let b = spec.generate_batch(&mut RngState::new(11), n);
        let mut counts = vec![0.0; spec.n_clusters()];
        b.labels.iter().for_each(|&c| counts[c] += 1.0);
        counts.into_iter().map(|c| c / n as f64).collect()
    }

    #[test]
    fn noiseless_single_cluster_repeats_the_mean() {
        let cfg = CorpusConfig {
            n_clusters: 1,
            noise_std: 0.0,
            ..CorpusConfig::default()
        };
        let spec = SyntheticCorpusSpec::from_config(&cfg, 5, &mut RngState::new(1)).unwrap();
        let b = spec.generate_batch(&mut RngState::new(2), 10);
        for t in 0..10 {
            assert_eq!(b.x.row(t), spec.cluster_means.row(0));
        }
    }

    #[test]
    fn uniform_frequencies() {
        let cfg = CorpusConfig {
            n_clusters: 4,
            zipf_exponent: 0.0,
            ..CorpusConfig::default()
        };
        let spec = SyntheticCorpusSpec::from_config(&cfg, 3, &mut RngState::new(1)).unwrap();
        for f in frequencies(&spec, 100_000) {
            assert!((f - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn zipf_frequencies() {
        let h = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        let expected = [1.0 / h, 0.5 / h, 1.0 / 3.0 / h, 0.25 / h];
        let w = zipf_weights(4, 1.0);
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let cfg = CorpusConfig {
            n_clusters: 4,
            ..CorpusConfig::default()
        };
        let spec = SyntheticCorpusSpec::from_config(&cfg, 3, &mut RngState::new(1)).unwrap();
        for (f, e) in frequencies(&spec, 100_000).iter().zip(expected) {
            assert!((f - e).abs() < 0.02);
        }
    }

    #[test]
    fn targets_follow_the_cluster_map() {
        let spec =
            SyntheticCorpusSpec::from_config(&CorpusConfig::default(), 4, &mut RngState::new(3))
                .unwrap();
        let b = spec.generate_batch(&mut RngState::new(4), 20);
        for t in 0..20 {
            let c = b.labels[t];
            let x = Matrix::from_rows(&[b.x.row(t).to_vec()]);
            let mut y = x.matmul(&spec.target_maps[c]).unwrap();
            y.add_assign(&Matrix::from_rows(&[spec.target_bias.row(c).to_vec()]))
                .unwrap();
            assert!(y.max_abs_diff(&Matrix::from_rows(&[b.targets.row(t).to_vec()])) < 1e-12);
        }
    }

    #[test]
    fn rejects_negative_exponent() {
        let cfg = CorpusConfig {
            zipf_exponent: -1.0,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

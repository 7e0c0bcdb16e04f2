//! Experiment configuration documents.
//!
//! A config is a JSON object. Every key is optional; missing keys take the
//! defaults below and unknown keys are rejected.

use lpr_core::metrics::MetricKind;
use lpr_core::moe::{CorpusConfig, ModelConfig, RouterKind};
use lpr_core::router::{DiversityKind, DiversityTarget, InitKind, LprWeights};
use lpr_core::train::{AdamWConfig, EmaConfig, LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub router: RouterKind,
    pub metric: MetricKind,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_latent: usize,
    /// Number of experts M.
    pub experts: usize,
    pub k: usize,
    pub variational: bool,
    /// Weight of the switch balance loss (vanilla_aux only).
    pub aux_coef: f64,
    pub beta_rs: f64,
    pub beta_div: f64,
    pub beta_align: f64,
    pub beta_kl: f64,
    pub diversity_kind: DiversityKind,
    pub diversity_target: DiversityTarget,
    pub init: InitKind,
    pub unit_ball: bool,
    pub score_scale: f64,
    pub ema: EmaConfig,
    pub corpus: CorpusConfig,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            model: ModelConfig {
                experts: 128,
                k: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        ExperimentConfig::from_train(&train)
    }
}

impl ExperimentConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        let m = &t.model;
        ExperimentConfig {
            router: m.router,
            metric: m.metric,
            layers: m.layers,
            d_model: m.d_model,
            d_ff: m.d_ff,
            d_latent: m.d_latent,
            experts: m.experts,
            k: m.k,
            variational: m.variational,
            aux_coef: m.aux_coef,
            beta_rs: m.weights.beta_rs,
            beta_div: m.weights.beta_div,
            beta_align: m.weights.beta_align,
            beta_kl: m.weights.beta_kl,
            diversity_kind: m.diversity_kind,
            diversity_target: m.diversity_target,
            init: m.init,
            unit_ball: m.unit_ball,
            score_scale: m.score_scale,
            ema: t.ema,
            corpus: t.corpus,
            schedule: t.schedule,
            optimizer: t.optimizer,
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            eval_batch: t.eval_batch,
            eval_every: t.eval_every,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                layers: self.layers,
                d_model: self.d_model,
                d_ff: self.d_ff,
                experts: self.experts,
                k: self.k,
                router: self.router,
                aux_coef: self.aux_coef,
                d_latent: self.d_latent,
                variational: self.variational,
                metric: self.metric,
                init: self.init,
                unit_ball: self.unit_ball,
                diversity_kind: self.diversity_kind,
                diversity_target: self.diversity_target,
                weights: LprWeights {
                    beta_rs: self.beta_rs,
                    beta_div: self.beta_div,
                    beta_align: self.beta_align,
                    beta_kl: self.beta_kl,
                },
                score_scale: self.score_scale,
            },
            corpus: self.corpus,
            schedule: self.schedule,
            optimizer: self.optimizer,
            ema: self.ema,
            seed: self.seed,
            steps: self.steps,
            batch_size: self.batch_size,
            eval_batch: self.eval_batch,
            eval_every: self.eval_every,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Canonical JSON: fixed key order, every key present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON, so equal configs hash equal
    /// regardless of key order or omitted defaults in the source text.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Parses and validates a config document. Blank text yields the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let config = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                ConfigError::Syntax {
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                }
            }
            _ => ConfigError::Invalid(e.to_string()),
        })?
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!((c.experts, c.k, c.d_latent, c.beta_rs), (128, 8, 16, 0.01));
        assert_eq!(parse_config("{}").unwrap(), c);
    }

    #[test]
    fn k_above_m_names_the_constraint() {
        let err = parse_config(r#"{"experts": 8, "k": 9}"#).unwrap_err();
        assert!(err.to_string().contains("k must not exceed M"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(r#"{"expertz": 8}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(err.to_string().contains("expertz"), "{err}");
        let nested = parse_config(r#"{"corpus": {"clusters": 3}}"#).unwrap_err();
        assert!(nested.to_string().contains("clusters"), "{nested}");
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_config("{\n  \"k\": 4,\n  oops\n}").unwrap_err();
        match err {
            ConfigError::Syntax { line, column, .. } => assert_eq!((line, column), (3, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_hash() {
        let a = parse_config(
            r#"{"k": 2, "experts": 16, "metric": {"kind": "gaussian_kernel", "sigma": 0.5}}"#,
        )
        .unwrap();
        let b = parse_config(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let reordered = parse_config(
            r#"{"metric": {"sigma": 0.5, "kind": "gaussian_kernel"}, "experts": 16, "k": 2}"#,
        )
        .unwrap();
        assert_eq!(a.hash(), reordered.hash());
        assert_ne!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn train_config_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_train(&c.train_config()), c);
    }
}

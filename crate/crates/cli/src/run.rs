//! Single experiments and ablation grids.

use lpr_core::metrics::MetricKind;
use lpr_core::router::DiversityKind;
use lpr_core::train::{train_with, EvalRecord, RunRecord};
use lpr_core::LprError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub step: usize,
    pub test_loss: f64,
    pub gini_hard: f64,
    pub gini_soft: f64,
    pub min_max_hard: f64,
    pub min_max_soft: f64,
    /// Per layer, hard token counts per expert.
    pub loads_hard: Vec<Vec<f64>>,
    pub loads_soft: Vec<Vec<f64>>,
}

impl ResultRow {
    pub fn from_eval(config_hash: &str, e: &EvalRecord) -> Self {
        let loads =
            |v: &[lpr_core::balance::LoadVector]| v.iter().map(|l| l.as_slice().to_vec()).collect();
        ResultRow {
            config_hash: config_hash.to_string(),
            step: e.step,
            test_loss: e.test_loss,
            gini_hard: e.gini_hard,
            gini_soft: e.gini_soft,
            min_max_hard: e.min_max_hard,
            min_max_soft: e.min_max_soft,
            loads_hard: loads(&e.hard_loads),
            loads_soft: loads(&e.soft_loads),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub router: String,
    pub steps_completed: usize,
    pub final_test_loss: f64,
    pub gini_hard: f64,
    pub gini_soft: f64,
    pub min_max_hard: f64,
    pub min_max_soft: f64,
    /// Set when training hit a non-finite loss or gradient.
    pub divergence: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub summary: RunSummary,
    pub record: RunRecord,
}

impl RunOutput {
    pub fn diverged(&self) -> bool {
        self.summary.divergence.is_some()
    }

    /// Final per-layer hard loads.
    pub fn final_loads(&self) -> &[Vec<f64>] {
        self.rows
            .last()
            .map(|r| r.loads_hard.as_slice())
            .unwrap_or(&[])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] LprError),
}

/// Trains `config`, calling `on_row` at each evaluation point.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut on_row: impl FnMut(&ResultRow),
) -> Result<RunOutput, RunError> {
    config.validate()?;
    let hash = config.hash();
    let mut rows = Vec::new();
    let record = train_with(config.train_config(), |e| {
        let row = ResultRow::from_eval(&hash, e);
        on_row(&row);
        rows.push(row);
    })?;
    let last = rows.last().expect("step 0 is always evaluated");
    let summary = RunSummary {
        config_hash: hash.clone(),
        router: config.router.name().to_string(),
        steps_completed: record.steps.len(),
        final_test_loss: last.test_loss,
        gini_hard: last.gini_hard,
        gini_soft: last.gini_soft,
        min_max_hard: last.min_max_hard,
        min_max_soft: last.min_max_soft,
        divergence: record.divergence.clone(),
    };
    Ok(RunOutput {
        rows,
        summary,
        record,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    run_experiment_with(config, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    LatentDim,
    RegStrength,
    /// Values of the form `M-k`, e.g. `64-4`.
    NkSetting,
    DiversityKind,
    MetricKind,
}

impl GridAxis {
    pub fn name(self) -> &'static str {
        match self {
            GridAxis::LatentDim => "latent_dim",
            GridAxis::RegStrength => "reg_strength",
            GridAxis::NkSetting => "nk_setting",
            GridAxis::DiversityKind => "diversity_kind",
            GridAxis::MetricKind => "metric_kind",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ConfigError> {
        [
            GridAxis::LatentDim,
            GridAxis::RegStrength,
            GridAxis::NkSetting,
            GridAxis::DiversityKind,
            GridAxis::MetricKind,
        ]
        .into_iter()
        .find(|a| a.name() == name)
        .ok_or_else(|| ConfigError::Invalid(format!("unknown grid axis `{name}`")))
    }

    /// Returns `base` with this axis set to `value`, validated.
    pub fn apply(
        self,
        base: &ExperimentConfig,
        value: &str,
    ) -> Result<ExperimentConfig, ConfigError> {
        let bad = |what: &str| {
            ConfigError::Invalid(format!("{}: bad value `{value}` ({what})", self.name()))
        };
        let mut c = *base;
        match self {
            GridAxis::LatentDim => {
                c.d_latent = value.parse().map_err(|_| bad("expected an integer"))?
            }
            GridAxis::RegStrength => {
                c.beta_rs = value.parse().map_err(|_| bad("expected a number"))?
            }
            GridAxis::NkSetting => {
                let (m, k) = value.split_once('-').ok_or_else(|| bad("expected M-k"))?;
                c.experts = m.parse().map_err(|_| bad("expected M-k"))?;
                c.k = k.parse().map_err(|_| bad("expected M-k"))?;
            }
            GridAxis::DiversityKind => {
                c.diversity_kind = match value {
                    "orthogonal" => DiversityKind::Orthogonal,
                    "cosine" => DiversityKind::Cosine,
                    "euclidean" => DiversityKind::Euclidean,
                    _ => return Err(bad("expected orthogonal, cosine or euclidean")),
                }
            }
            GridAxis::MetricKind => {
                c.metric = parse_metric(value).ok_or_else(|| bad("unknown metric"))?
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Metric names as used on the command line. Parameterized kinds take an
/// optional `:value` suffix, e.g. `gaussian_kernel:0.5` or `multi_head_dot:4`.
pub fn parse_metric(value: &str) -> Option<MetricKind> {
    let (name, param) = match value.split_once(':') {
        Some((n, p)) => (n, Some(p)),
        None => (value, None),
    };
    let metric = match name {
        "cosine" => MetricKind::Cosine,
        "gaussian_kernel" => MetricKind::GaussianKernel {
            sigma: param.map_or(Some(1.0), |p| p.parse().ok())?,
        },
        "multi_head_dot" => MetricKind::MultiHeadDot {
            heads: param.map_or(Some(4), |p| p.parse().ok())?,
        },
        "mahalanobis" => MetricKind::Mahalanobis,
        "wasserstein2" => MetricKind::Wasserstein2,
        "kl" => MetricKind::Kl,
        "js" => MetricKind::Js,
        "hellinger" => MetricKind::Hellinger,
        _ => return None,
    };
    if param.is_some()
        && !matches!(
            metric,
            MetricKind::GaussianKernel { .. } | MetricKind::MultiHeadDot { .. }
        )
    {
        return None;
    }
    Some(metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub axis: String,
    pub value: String,
    pub test_loss: f64,
    pub gini_hard: f64,
    pub min_max_hard: f64,
    pub gini_soft: f64,
    pub min_max_soft: f64,
    pub divergence: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub row: GridRow,
    pub output: RunOutput,
}

/// Runs one experiment per axis value in parallel. Every cell trains with
/// the base seed, so cells differ only in the swept setting. A diverged
/// cell is recorded and the grid continues.
pub fn run_grid(
    base: &ExperimentConfig,
    axis: GridAxis,
    values: &[String],
) -> Result<Vec<GridCell>, RunError> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(config, value)| {
            let output = run_experiment(config)?;
            let s = &output.summary;
            let row = GridRow {
                axis: axis.name().to_string(),
                value: value.clone(),
                test_loss: s.final_test_loss,
                gini_hard: s.gini_hard,
                min_max_hard: s.min_max_hard,
                gini_soft: s.gini_soft,
                min_max_soft: s.min_max_soft,
                divergence: s.divergence.clone(),
            };
            Ok(GridCell { row, output })
        })
        .collect()
}

//! Expert-load accounting: Gini coefficient and min-max ratio.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::router::RoutingDecision;

pub const MIN_MAX_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Count of tokens whose top-k contains the expert.
    Hard,
    /// Sum of the expert's routing probabilities.
    Soft,
}

/// Per-expert load. Entries are nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadVector {
    loads: Vec<f64>,
}

impl LoadVector {
    pub fn zeros(experts: usize) -> Self {
        LoadVector {
            loads: vec![0.0; experts],
        }
    }

    pub fn new(loads: Vec<f64>) -> Result<Self> {
        if let Some(v) = loads.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(LprError::param(format!(
                "loads must be finite and nonnegative, got {v}"
            )));
        }
        Ok(LoadVector { loads })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.loads
    }

    pub fn experts(&self) -> usize {
        self.loads.len()
    }

    pub fn total(&self) -> f64 {
        self.loads.iter().sum()
    }

    /// Adds a partial accumulation into this one.
    pub fn merge(&mut self, other: &LoadVector) -> Result<()> {
        if other.experts() != self.experts() {
            return Err(LprError::shape(
                "LoadVector::merge",
                (1, self.experts()),
                (1, other.experts()),
            ));
        }
        self.loads
            .iter_mut()
            .zip(&other.loads)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Adds one routing decision's loads.
    pub fn add_decision(&mut self, decision: &RoutingDecision, mode: LoadMode) -> Result<()> {
        if decision.experts() != self.experts() {
            return Err(LprError::shape(
                "accumulate_loads",
                (1, self.experts()),
                decision.probs.shape(),
            ));
        }
        match mode {
            LoadMode::Hard => decision.topk_idx.iter().for_each(|&e| self.loads[e] += 1.0),
            LoadMode::Soft => {
                for row in decision.probs.row_iter() {
                    self.loads.iter_mut().zip(row).for_each(|(a, p)| *a += p);
                }
            }
        }
        Ok(())
    }

    /// Loads rescaled to sum to one (all zeros stay zero).
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total > 0.0 {
            self.loads.iter().map(|v| v / total).collect()
        } else {
            self.loads.clone()
        }
    }

    pub fn gini(&self) -> Result<f64> {
        gini(&self.loads)
    }

    pub fn min_max_ratio(&self) -> f64 {
        min_max_ratio(&self.loads, MIN_MAX_EPS)
    }
}

/// `(1/(nΣl)) Σᵢ (2i − n − 1) l₍ᵢ₎` over loads sorted ascending, `i` from 1.
pub fn gini(loads: &[f64]) -> Result<f64> {
    let total: f64 = loads.iter().sum();
    if loads.is_empty() || !(total > 0.0) {
        return Err(LprError::UndefinedInput(
            "gini of an all-zero load vector".into(),
        ));
    }
    let mut sorted = loads.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let acc: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &l)| (2.0 * (i as f64 + 1.0) - n - 1.0) * l)
        .sum();
    Ok(acc / (n * total))
}

/// `min(l) / (max(l) + eps)`.
pub fn min_max_ratio(loads: &[f64], eps: f64) -> f64 {
    if loads.is_empty() {
        return 0.0;
    }
    let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
    let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    min / (max + eps)
}

pub fn accumulate_loads<'a, I>(decisions: I, experts: usize, mode: LoadMode) -> Result<LoadVector>
where
    I: IntoIterator<Item = &'a RoutingDecision>,
{
    let mut acc = LoadVector::zeros(experts);
    for d in decisions {
        acc.add_decision(d, mode)?;
    }
    Ok(acc)
}

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::moe::{MoeModel, ParamClass};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(LprError::param(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        for (name, v) in [
            ("optimizer.eps", self.eps),
            ("optimizer.weight_decay", self.weight_decay),
            ("optimizer.clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LprError::param(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// AdamW moments for a flat list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        OptimizerState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn for_model(config: AdamWConfig, model: &mut MoeModel) -> Self {
        Self::new(config, model.params_mut().iter().map(|(_, p)| p.shape()))
    }

    /// Clips `grads` to the global norm cap and applies one AdamW update.
    /// Frozen parameters neither move nor count toward the norm. Returns
    /// the pre-clip global norm.
    pub fn step(
        &mut self,
        params: Vec<(ParamClass, &mut Matrix)>,
        grads: Vec<&mut Matrix>,
        lr: f64,
    ) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(LprError::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut sq = 0.0;
        for ((class, p), g) in params.iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(LprError::shape(
                    "OptimizerState::step",
                    p.shape(),
                    g.shape(),
                ));
            }
            if *class != ParamClass::Frozen {
                sq += g.sum_sq();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(LprError::Divergence {
                step: self.step as usize,
                reason: "non-finite gradient".into(),
            });
        }
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((class, p), g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if class == ParamClass::Frozen {
                continue;
            }
            g.scale_in_place(clip);
            let decay = if class == ParamClass::Decay {
                c.weight_decay
            } else {
                0.0
            };
            let ps = p.as_mut_slice();
            for (((pi, &gi), mi), vi) in ps
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *pi -= lr * (update + decay * *pi);
            }
        }
        Ok(norm)
    }

    /// Updates a model in place from gradients shaped like it, then
    /// re-applies the prototype constraints.
    pub fn step_model(
        &mut self,
        model: &mut MoeModel,
        grads: &mut MoeModel,
        lr: f64,
    ) -> Result<f64> {
        let g = grads.params_mut().into_iter().map(|(_, m)| m).collect();
        let norm = self.step(model.params_mut(), g, lr)?;
        model.enforce_constraints();
        Ok(norm)
    }
}

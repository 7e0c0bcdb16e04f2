//! Stacked residual MoE layers, `h_{l+1} = h_l + MoE_l(h_l)`, trained to
//! regress `h_L` onto the corpus targets.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::metrics::MetricKind;
use crate::numerics::{sample_gaussian, Matrix, RngState};
use crate::router::{
    gating_backward, route_from_scores, DiversityKind, DiversityTarget, Encoded, EncoderMode,
    InitKind, LprForward, LprLosses, LprRouter, LprSettings, LprWeights, RoutingDecision,
};

use super::expert::ExpertNet;
use super::layer::{aux_balance_loss_grad, moe_backward, moe_forward, mse_loss_grad, MoeOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Linear router `S = h Wᵀ`.
    Vanilla,
    /// Linear router plus the switch-style balance loss.
    VanillaAux,
    Lpr,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Vanilla => "vanilla",
            RouterKind::VanillaAux => "vanilla_aux",
            RouterKind::Lpr => "lpr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub experts: usize,
    pub k: usize,
    pub router: RouterKind,
    pub aux_coef: f64,
    pub d_latent: usize,
    pub variational: bool,
    pub metric: MetricKind,
    pub init: InitKind,
    pub unit_ball: bool,
    pub diversity_kind: DiversityKind,
    pub diversity_target: DiversityTarget,
    pub weights: LprWeights,
    pub score_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            experts: 32,
            k: 4,
            router: RouterKind::Lpr,
            aux_coef: 1e-3,
            d_latent: 16,
            variational: true,
            metric: MetricKind::Cosine,
            init: InitKind::Hyperspherical,
            unit_ball: true,
            diversity_kind: DiversityKind::Orthogonal,
            diversity_target: DiversityTarget::Prototypes,
            weights: LprWeights::default(),
            score_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("experts", self.experts),
            ("k", self.k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(LprError::param(format!("{name} must be at least 1")));
        }
        if self.k > self.experts {
            return Err(LprError::param(format!(
                "k must not exceed M (k={}, M={})",
                self.k, self.experts
            )));
        }
        if self.router == RouterKind::Lpr {
            if self.d_latent == 0 || self.d_latent > self.d_model {
                return Err(LprError::param(format!(
                    "d_latent must be in 1..=d_model, got {}",
                    self.d_latent
                )));
            }
            self.metric.validate(self.d_latent)?;
        }
        let w = self.weights;
        for (name, v) in [
            ("beta_rs", w.beta_rs),
            ("beta_div", w.beta_div),
            ("beta_align", w.beta_align),
            ("beta_kl", w.beta_kl),
            ("aux_coef", self.aux_coef),
            ("score_scale", self.score_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LprError::param(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn train_mode(&self) -> EncoderMode {
        if self.variational {
            EncoderMode::Variational
        } else {
            EncoderMode::Deterministic
        }
    }

    pub fn eval_mode(&self) -> EncoderMode {
        if self.variational {
            EncoderMode::VariationalEval
        } else {
            EncoderMode::Deterministic
        }
    }

    pub fn lpr_settings(&self) -> LprSettings {
        LprSettings {
            metric: self.metric,
            k: self.k,
            mode: self.train_mode(),
            diversity_kind: self.diversity_kind,
            diversity_target: self.diversity_target,
            weights: self.weights,
            score_scale: self.score_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Router {
    /// `M x d_model` expert keys.
    Linear {
        keys: Matrix,
    },
    Lpr(LprRouter),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<ExpertNet>,
}

/// How the optimizer treats a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Decay,
    NoDecay,
    Frozen,
}

#[derive(Debug, Clone)]
pub enum RouterForward {
    Linear(RoutingDecision),
    Lpr(LprForward),
}

impl RouterForward {
    pub fn decision(&self) -> &RoutingDecision {
        match self {
            RouterForward::Linear(d) => d,
            RouterForward::Lpr(f) => &f.decision,
        }
    }

    pub fn encoded(&self) -> Option<&Encoded> {
        match self {
            RouterForward::Linear(_) => None,
            RouterForward::Lpr(f) => Some(&f.encoded),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerForward {
    pub input: Matrix,
    pub router: RouterForward,
    pub moe: MoeOutput,
}

#[derive(Debug, Clone)]
pub struct ModelForward {
    pub layers: Vec<LayerForward>,
    pub output: Matrix,
}

impl ModelForward {
    pub fn decisions(&self) -> impl Iterator<Item = &RoutingDecision> {
        self.layers.iter().map(|l| l.router.decision())
    }

    /// Token-side encoder outputs, one per LPR layer. Passing these back as
    /// `frozen` holds the alignment loss's token side constant.
    pub fn frozen_tokens(&self) -> Vec<Encoded> {
        self.layers
            .iter()
            .filter_map(|l| l.router.encoded().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLosses {
    pub task: f64,
    /// Mean over layers of the balance loss (zero unless the router uses it).
    pub aux: f64,
    /// Component means over layers; `total_reg` weighted accordingly.
    pub lpr: LprLosses,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: ModelConfig,
    pub layers: Vec<MoeLayer>,
}

impl MoeModel {
    pub fn init(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let router = match config.router {
                RouterKind::Vanilla | RouterKind::VanillaAux => Router::Linear {
                    keys: sample_gaussian(rng, config.experts, config.d_model)
                        .scale(1.0 / (config.d_model as f64).sqrt()),
                },
                RouterKind::Lpr => Router::Lpr(LprRouter::init(
                    rng,
                    config.d_model,
                    config.d_latent,
                    config.experts,
                    config.variational,
                    config.init,
                    config.unit_ball,
                )?),
            };
            let experts = (0..config.experts)
                .map(|_| ExpertNet::init(rng, config.d_model, config.d_ff))
                .collect::<Result<Vec<_>>>()?;
            layers.push(MoeLayer { router, experts });
        }
        Ok(MoeModel { config, layers })
    }

    pub fn zeros_like(&self) -> Self {
        MoeModel {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| MoeLayer {
                    router: match &l.router {
                        Router::Linear { keys } => Router::Linear {
                            keys: Matrix::zeros(keys.rows(), keys.cols()),
                        },
                        Router::Lpr(r) => Router::Lpr(r.zeros_like()),
                    },
                    experts: l.experts.iter().map(ExpertNet::zeros_like).collect(),
                })
                .collect(),
        }
    }

    /// Every parameter tensor in a fixed order with its optimizer class.
    pub fn params_mut(&mut self) -> Vec<(ParamClass, &mut Matrix)> {
        let proto_var = if self.config.metric.uses_prototype_variance() {
            ParamClass::NoDecay
        } else {
            ParamClass::Frozen
        };
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match &mut layer.router {
                Router::Linear { keys } => out.push((ParamClass::Decay, keys)),
                Router::Lpr(r) => {
                    out.push((ParamClass::Decay, &mut r.encoder.w1));
                    out.push((ParamClass::NoDecay, &mut r.encoder.b1));
                    if let Some(h) = r.encoder.variational.as_mut() {
                        out.push((ParamClass::Decay, &mut h.w));
                        out.push((ParamClass::NoDecay, &mut h.b));
                    }
                    out.push((ParamClass::Decay, &mut r.prototypes.means));
                    out.push((proto_var, &mut r.prototypes.log_vars));
                }
            }
            for e in &mut layer.experts {
                out.push((ParamClass::Decay, &mut e.w_in));
                out.push((ParamClass::NoDecay, &mut e.b_in));
                out.push((ParamClass::Decay, &mut e.w_out));
                out.push((ParamClass::NoDecay, &mut e.b_out));
            }
        }
        out
    }

    /// Re-applies parameter constraints (prototype unit ball).
    pub fn enforce_constraints(&mut self) {
        for layer in &mut self.layers {
            if let Router::Lpr(r) = &mut layer.router {
                r.prototypes.enforce_constraints();
            }
        }
    }

    /// Forward pass drawing reparameterization noise from `rng` when
    /// `mode` samples.
    pub fn forward(
        &self,
        x: &Matrix,
        mode: EncoderMode,
        rng: &mut RngState,
    ) -> Result<ModelForward> {
        let noise = (mode == EncoderMode::Variational && self.config.router == RouterKind::Lpr)
            .then(|| {
                (0..self.layers.len())
                    .map(|_| sample_gaussian(rng, x.rows(), self.config.d_latent))
                    .collect()
            });
        self.forward_with_noise(x, mode, noise)
    }

    pub fn forward_with_noise(
        &self,
        x: &Matrix,
        mode: EncoderMode,
        noise: Option<Vec<Matrix>>,
    ) -> Result<ModelForward> {
        if x.cols() != self.config.d_model {
            return Err(LprError::shape(
                "MoeModel::forward",
                x.shape(),
                (x.rows(), self.config.d_model),
            ));
        }
        let mut noise = noise.map(Vec::into_iter);
        let settings = self.config.lpr_settings();
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let router = match &layer.router {
                Router::Linear { keys } => {
                    RouterForward::Linear(route_from_scores(h.matmul_t(keys)?, self.config.k)?)
                }
                Router::Lpr(r) => {
                    let n = noise.as_mut().and_then(Iterator::next);
                    RouterForward::Lpr(r.forward(&h, &settings, mode, n)?)
                }
            };
            let moe = moe_forward(&layer.experts, router.decision(), &h)?;
            let next = h.add(&moe.y)?;
            layers.push(LayerForward {
                input: std::mem::replace(&mut h, next),
                router,
                moe,
            });
        }
        Ok(ModelForward { layers, output: h })
    }

    /// Noise matrices used by a forward pass, for replaying it exactly.
    pub fn noise_of(fwd: &ModelForward) -> Option<Vec<Matrix>> {
        fwd.layers
            .iter()
            .map(|l| l.router.encoded().and_then(|e| e.noise().cloned()))
            .collect()
    }

    /// Loss values only. `frozen` plays the same role as in [`Self::backward`].
    pub fn losses(
        &self,
        fwd: &ModelForward,
        targets: &Matrix,
        frozen: Option<&[Encoded]>,
    ) -> Result<ModelLosses> {
        let (task, _) = mse_loss_grad(&fwd.output, targets)?;
        let n_layers = self.layers.len() as f64;
        let settings = self.config.lpr_settings();
        let mut aux = 0.0;
        let mut parts = [0.0; 3];
        let mut lpr_idx = 0;
        for (layer, lf) in self.layers.iter().zip(&fwd.layers) {
            match (&layer.router, &lf.router) {
                (Router::Lpr(r), RouterForward::Lpr(f)) => {
                    let fz = frozen.map(|fz| &fz[lpr_idx]);
                    lpr_idx += 1;
                    let l = r.losses(f, &settings, fz)?;
                    parts[0] += l.kl;
                    parts[1] += l.diversity;
                    parts[2] += l.alignment;
                }
                (_, RouterForward::Linear(d)) if self.config.router == RouterKind::VanillaAux => {
                    aux += aux_balance_loss_grad(d).0;
                }
                _ => {}
            }
        }
        Ok(self.combine(task, aux / n_layers, parts.map(|p| p / n_layers)))
    }

    fn combine(&self, task: f64, aux: f64, [kl, div, align]: [f64; 3]) -> ModelLosses {
        let lpr = LprLosses::new(kl, div, align, &self.config.weights);
        let aux_term = if self.config.router == RouterKind::VanillaAux {
            self.config.aux_coef * aux
        } else {
            0.0
        };
        ModelLosses {
            task,
            aux,
            lpr,
            total: task + aux_term + lpr.total_reg,
        }
    }

    /// Losses and gradients of `total` w.r.t. every parameter. When
    /// `frozen` is given, alignment reads its token side from it.
    pub fn backward(
        &self,
        fwd: &ModelForward,
        targets: &Matrix,
        frozen: Option<&[Encoded]>,
    ) -> Result<(ModelLosses, MoeModel)> {
        let (task, mut d_h) = mse_loss_grad(&fwd.output, targets)?;
        let n_layers = self.layers.len() as f64;
        let mut grad_settings = self.config.lpr_settings();
        grad_settings.weights.beta_rs /= n_layers;
        let aux_scale = self.config.aux_coef / n_layers;

        let mut grads = self.zeros_like();
        let mut aux = 0.0;
        let mut parts = [0.0; 3];
        let mut lpr_idx = frozen.map_or(0, <[Encoded]>::len);
        for ((layer, lf), g) in self
            .layers
            .iter()
            .zip(&fwd.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            let decision = lf.router.decision();
            let (d_x, d_w) = moe_backward(&layer.experts, decision, &lf.moe, &d_h, &mut g.experts)?;
            d_h.add_assign(&d_x)?;
            let mut d_scores = gating_backward(decision, &d_w)?;

            match (&layer.router, &lf.router, &mut g.router) {
                (
                    Router::Linear { keys },
                    RouterForward::Linear(d),
                    Router::Linear { keys: gk },
                ) => {
                    if self.config.router == RouterKind::VanillaAux {
                        let (a, d_aux) = aux_balance_loss_grad(d);
                        aux += a;
                        d_scores.axpy(aux_scale, &d_aux)?;
                    }
                    gk.add_assign(&d_scores.t_matmul(&lf.input)?)?;
                    d_h.add_assign(&d_scores.matmul(keys)?)?;
                }
                (Router::Lpr(r), RouterForward::Lpr(f), Router::Lpr(gr)) => {
                    let fz = match frozen {
                        Some(fz) => {
                            lpr_idx -= 1;
                            Some(&fz[lpr_idx])
                        }
                        None => None,
                    };
                    let back = r.backward(&lf.input, f, &grad_settings, Some(&d_scores), fz)?;
                    parts[0] += back.losses.kl;
                    parts[1] += back.losses.diversity;
                    parts[2] += back.losses.alignment;
                    *gr = back.grads;
                    d_h.add_assign(&back.d_input)?;
                }
                _ => return Err(LprError::Contract("router/forward kind mismatch".into())),
            }
        }
        Ok((
            self.combine(task, aux / n_layers, parts.map(|p| p / n_layers)),
            grads,
        ))
    }
}

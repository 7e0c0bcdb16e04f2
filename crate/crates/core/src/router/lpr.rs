//! Latent prototype router: encoder + prototypes + metric, with the
//! KL, diversity and alignment regularizers and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{LprError, Result};
use crate::metrics::{score_rows, score_rows_backward, GaussianRows, MetricKind, ScoreGrads};
use crate::numerics::{softmax_rows, softmax_rows_backward, Matrix, RngState};

use super::encoder::{
    encode_with_noise, encoder_backward, Encoded, EncoderMode, EncoderParams, EncoderUpstream,
};
use super::losses::{
    alignment_loss_grad, diversity_loss_grad, kl_loss_grad, DiversityKind, DiversityTarget,
};
use super::prototypes::{ExpertPrototypes, InitKind};
use super::routing::{route_from_scores, RoutingDecision};

/// Regularization weights. The combined term is
/// `beta_rs · (beta_div·L_div + beta_align·L_align + beta_kl·L_KL)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LprWeights {
    pub beta_rs: f64,
    pub beta_div: f64,
    pub beta_align: f64,
    pub beta_kl: f64,
}

impl Default for LprWeights {
    fn default() -> Self {
        LprWeights {
            beta_rs: 0.01,
            beta_div: 1.0,
            beta_align: 0.05,
            beta_kl: 0.01,
        }
    }
}

impl LprWeights {
    pub fn zero() -> Self {
        LprWeights {
            beta_rs: 0.0,
            beta_div: 0.0,
            beta_align: 0.0,
            beta_kl: 0.0,
        }
    }

    pub fn combine(&self, diversity: f64, alignment: f64, kl: f64) -> f64 {
        self.beta_rs * (self.beta_div * diversity + self.beta_align * alignment + self.beta_kl * kl)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LprLosses {
    pub kl: f64,
    pub diversity: f64,
    pub alignment: f64,
    /// Weighted combination, see [`LprWeights::combine`].
    pub total_reg: f64,
}

impl LprLosses {
    pub fn new(kl: f64, diversity: f64, alignment: f64, weights: &LprWeights) -> Self {
        LprLosses {
            kl,
            diversity,
            alignment,
            total_reg: weights.combine(diversity, alignment, kl),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LprSettings {
    pub metric: MetricKind,
    pub k: usize,
    pub mode: EncoderMode,
    pub diversity_kind: DiversityKind,
    pub diversity_target: DiversityTarget,
    pub weights: LprWeights,
    /// Multiplies metric scores before the softmax; 1 leaves them as is.
    pub score_scale: f64,
}

impl Default for LprSettings {
    fn default() -> Self {
        LprSettings {
            metric: MetricKind::Cosine,
            k: 8,
            mode: EncoderMode::Variational,
            diversity_kind: DiversityKind::Orthogonal,
            diversity_target: DiversityTarget::Prototypes,
            weights: LprWeights::default(),
            score_scale: 1.0,
        }
    }
}

impl LprSettings {
    fn scores(&self, tokens: GaussianRows<'_>, protos: GaussianRows<'_>) -> Result<Matrix> {
        let mut s = score_rows(tokens, protos, self.metric)?;
        if self.score_scale != 1.0 {
            s.scale_in_place(self.score_scale);
        }
        Ok(s)
    }

    fn scores_backward(
        &self,
        tokens: GaussianRows<'_>,
        protos: GaussianRows<'_>,
        upstream: &Matrix,
    ) -> Result<ScoreGrads> {
        if self.score_scale != 1.0 {
            score_rows_backward(
                tokens,
                protos,
                self.metric,
                &upstream.scale(self.score_scale),
            )
        } else {
            score_rows_backward(tokens, protos, self.metric, upstream)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LprRouter {
    pub encoder: EncoderParams,
    pub prototypes: ExpertPrototypes,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LprForward {
    pub encoded: Encoded,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone)]
pub struct LprBackward {
    pub losses: LprLosses,
    pub grads: LprRouter,
    /// Gradient w.r.t. the router input.
    pub d_input: Matrix,
}

impl LprRouter {
    pub fn init(
        rng: &mut RngState,
        d_model: usize,
        d_latent: usize,
        experts: usize,
        variational: bool,
        init: InitKind,
        unit_ball: bool,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(rng, d_model, d_latent, variational)?;
        let prototypes = ExpertPrototypes::init(init, rng, experts, d_latent, unit_ball)?;
        Ok(LprRouter {
            encoder,
            prototypes,
        })
    }

    pub fn zeros_like(&self) -> Self {
        LprRouter {
            encoder: self.encoder.zeros_like(),
            prototypes: self.prototypes.zeros_like(),
        }
    }

    /// Encodes and routes. `noise` is required when `mode` samples.
    pub fn forward(
        &self,
        x: &Matrix,
        settings: &LprSettings,
        mode: EncoderMode,
        noise: Option<Matrix>,
    ) -> Result<LprForward> {
        let encoded = encode_with_noise(&self.encoder, x, mode, noise)?;
        let scores = settings.scores(
            encoded.scoring_rows(settings.metric.is_distributional()),
            self.prototypes.rows(),
        )?;
        let decision = route_from_scores(scores, settings.k)?;
        Ok(LprForward { encoded, decision })
    }

    /// Regularizer values. Alignment reads its token side from `frozen`
    /// when given, which is how the stop-gradient is expressed to a
    /// finite-difference oracle.
    pub fn losses(
        &self,
        fwd: &LprForward,
        settings: &LprSettings,
        frozen: Option<&Encoded>,
    ) -> Result<LprLosses> {
        Ok(self.regularize(fwd, settings, frozen, None)?.0)
    }

    /// Gradients of `total_reg + Σ upstream ⊙ scores` w.r.t. every router
    /// parameter and the router input.
    pub fn backward(
        &self,
        x: &Matrix,
        fwd: &LprForward,
        settings: &LprSettings,
        upstream_scores: Option<&Matrix>,
        frozen: Option<&Encoded>,
    ) -> Result<LprBackward> {
        let mut grads = self.zeros_like();
        let (b, d) = fwd.encoded.z.shape();
        let mut up = EncoderUpstream::zeros(b, d);
        let (losses, _) = self.regularize(fwd, settings, frozen, Some((&mut grads, &mut up)))?;

        if let Some(d_scores) = upstream_scores {
            let distributional = settings.metric.is_distributional();
            let sg = settings.scores_backward(
                fwd.encoded.scoring_rows(distributional),
                self.prototypes.rows(),
                d_scores,
            )?;
            if distributional {
                up.mean.add_assign(&sg.token_mean)?;
                up.log_var.add_assign(&sg.token_log_var)?;
            } else {
                up.z.add_assign(&sg.token_mean)?;
            }
            grads.prototypes.means.add_assign(&sg.proto_mean)?;
            grads.prototypes.log_vars.add_assign(&sg.proto_log_var)?;
        }

        let (enc_grads, d_input) = encoder_backward(&self.encoder, x, &fwd.encoded, &up)?;
        grads.encoder = enc_grads;
        Ok(LprBackward {
            losses,
            grads,
            d_input,
        })
    }

    fn regularize(
        &self,
        fwd: &LprForward,
        settings: &LprSettings,
        frozen: Option<&Encoded>,
        mut sink: Option<(&mut LprRouter, &mut EncoderUpstream)>,
    ) -> Result<(LprLosses, ())> {
        let w = settings.weights;
        let enc = &fwd.encoded;

        let kl = if enc.mode.is_variational() {
            let (kl, d_mean, d_lv) = kl_loss_grad(&enc.latent)?;
            if let Some((_, up)) = sink.as_mut() {
                let c = w.beta_rs * w.beta_kl;
                up.mean.axpy(c, &d_mean)?;
                up.log_var.axpy(c, &d_lv)?;
            }
            kl
        } else {
            0.0
        };

        let c_div = w.beta_rs * w.beta_div;
        let target = settings.diversity_target;
        let mut diversity = 0.0;
        if target.includes_prototypes() {
            let (v, g) = diversity_loss_grad(&self.prototypes.means, settings.diversity_kind);
            if let Some((grads, _)) = sink.as_mut() {
                grads.prototypes.means.axpy(c_div, &g)?;
            }
            diversity += v;
        }
        if target.includes_tokens() {
            let (v, g) = diversity_loss_grad(&enc.latent.mean, settings.diversity_kind);
            if let Some((_, up)) = sink.as_mut() {
                up.mean.axpy(c_div, &g)?;
            }
            diversity += v;
        }

        // Alignment: the token side is a constant; only prototypes move.
        let tokens = frozen.unwrap_or(enc);
        let distributional = settings.metric.is_distributional();
        let token_rows = tokens.scoring_rows(distributional);
        let scores = settings.scores(token_rows, self.prototypes.rows())?;
        let probs = softmax_rows(&scores);
        let ag = alignment_loss_grad(&tokens.z, &probs, &self.prototypes.means)?;
        if let Some((grads, _)) = sink.as_mut() {
            let c = w.beta_rs * w.beta_align;
            if c != 0.0 {
                grads.prototypes.means.axpy(c, &ag.means)?;
                let d_scores = softmax_rows_backward(&probs, &ag.probs.scale(c));
                let sg = settings.scores_backward(token_rows, self.prototypes.rows(), &d_scores)?;
                grads.prototypes.means.add_assign(&sg.proto_mean)?;
                grads.prototypes.log_vars.add_assign(&sg.proto_log_var)?;
            }
        }

        Ok((LprLosses::new(kl, diversity, ag.loss, &w), ()))
    }
}

/// Regularization losses of one router on one batch and their gradients
/// w.r.t. every router parameter (no task loss).
pub fn lpr_losses_and_grads(
    router: &LprRouter,
    x: &Matrix,
    settings: &LprSettings,
    noise: Option<Matrix>,
) -> Result<(LprLosses, LprRouter)> {
    if settings.k > router.prototypes.experts() {
        return Err(LprError::param(format!(
            "k={} exceeds the number of experts {}",
            settings.k,
            router.prototypes.experts()
        )));
    }
    let fwd = router.forward(x, settings, settings.mode, noise)?;
    let back = router.backward(x, &fwd, settings, None, None)?;
    Ok((back.losses, back.grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, sample_gaussian};

    fn setup(seed: u64, metric: MetricKind) -> (LprRouter, Matrix, Matrix, LprSettings) {
        let mut rng = RngState::new(seed);
        let mut router =
            LprRouter::init(&mut rng, 8, 4, 6, true, InitKind::Hyperspherical, false).unwrap();
        let head = router.encoder.variational.as_mut().unwrap();
        head.w = sample_gaussian(&mut rng, 8, 4).scale(0.3);
        router.encoder.b1 = sample_gaussian(&mut rng, 1, 4).scale(0.2);
        router.prototypes.log_vars = sample_gaussian(&mut rng, 6, 4).scale(0.3);
        let x = sample_gaussian(&mut rng, 5, 8);
        let noise = sample_gaussian(&mut rng, 5, 4);
        let settings = LprSettings {
            metric,
            k: 2,
            weights: LprWeights {
                beta_rs: 0.7,
                beta_div: 1.3,
                beta_align: 0.9,
                beta_kl: 1.1,
            },
            ..LprSettings::default()
        };
        (router, x, noise, settings)
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let (router, x, noise, mut settings) = setup(1, MetricKind::Kl);
        settings.weights = LprWeights::zero();
        let (_, g) = lpr_losses_and_grads(&router, &x, &settings, Some(noise)).unwrap();
        assert_eq!(g.encoder.w1.sum_sq(), 0.0);
        assert_eq!(g.encoder.variational.unwrap().w.sum_sq(), 0.0);
        assert_eq!(g.prototypes.means.sum_sq(), 0.0);
        assert_eq!(g.prototypes.log_vars.sum_sq(), 0.0);
    }

    #[test]
    fn gradients_scale_linearly_with_beta_rs() {
        let (router, x, noise, settings) = setup(2, MetricKind::Cosine);
        let (_, g1) = lpr_losses_and_grads(&router, &x, &settings, Some(noise.clone())).unwrap();
        let mut scaled = settings;
        scaled.weights.beta_rs *= 10.0;
        let (_, g10) = lpr_losses_and_grads(&router, &x, &scaled, Some(noise)).unwrap();
        assert!(g10.encoder.w1.max_abs_diff(&g1.encoder.w1.scale(10.0)) < 1e-12);
        assert!(
            g10.prototypes
                .means
                .max_abs_diff(&g1.prototypes.means.scale(10.0))
                < 1e-12
        );
    }

    #[test]
    fn total_reg_combines_components() {
        let (router, x, noise, settings) = setup(3, MetricKind::Cosine);
        let (l, _) = lpr_losses_and_grads(&router, &x, &settings, Some(noise)).unwrap();
        let w = settings.weights;
        let expected =
            w.beta_rs * (w.beta_div * l.diversity + w.beta_align * l.alignment + w.beta_kl * l.kl);
        assert_eq!(l.total_reg, expected);
        assert!(l.kl >= 0.0 && l.diversity >= 0.0 && l.alignment >= 0.0);
    }

    #[test]
    fn reg_gradients_match_finite_differences() {
        for target in [
            DiversityTarget::Prototypes,
            DiversityTarget::Tokens,
            DiversityTarget::Both,
        ] {
            for metric in MetricKind::all() {
                let (router, x, noise, mut settings) = setup(4, metric);
                settings.diversity_target = target;
                if target == DiversityTarget::Both {
                    settings.score_scale = 2.5;
                }
                let base = router
                    .forward(&x, &settings, settings.mode, Some(noise.clone()))
                    .unwrap();
                let frozen = base.encoded.clone();
                let objective = |r: &LprRouter| {
                    let f = r
                        .forward(&x, &settings, settings.mode, Some(noise.clone()))
                        .unwrap();
                    r.losses(&f, &settings, Some(&frozen)).unwrap().total_reg
                };
                let (_, g) =
                    lpr_losses_and_grads(&router, &x, &settings, Some(noise.clone())).unwrap();
                let h = 1e-5;
                let check = |analytic: &Matrix, fd: Matrix, what: &str| {
                    let err = max_relative_error(analytic, &fd);
                    assert!(err < 1e-4, "{metric:?} {target:?} {what}: {err}");
                };
                check(
                    &g.encoder.w1,
                    finite_diff_grad(
                        |w| {
                            let mut r = router.clone();
                            r.encoder.w1 = w.clone();
                            objective(&r)
                        },
                        &router.encoder.w1,
                        h,
                    )
                    .unwrap(),
                    "w1",
                );
                let head = router.encoder.variational.as_ref().unwrap();
                check(
                    &g.encoder.variational.as_ref().unwrap().w,
                    finite_diff_grad(
                        |w| {
                            let mut r = router.clone();
                            r.encoder.variational.as_mut().unwrap().w = w.clone();
                            objective(&r)
                        },
                        &head.w,
                        h,
                    )
                    .unwrap(),
                    "head w",
                );
                check(
                    &g.prototypes.means,
                    finite_diff_grad(
                        |m| {
                            let mut r = router.clone();
                            r.prototypes.means = m.clone();
                            objective(&r)
                        },
                        &router.prototypes.means,
                        h,
                    )
                    .unwrap(),
                    "means",
                );
                check(
                    &g.prototypes.log_vars,
                    finite_diff_grad(
                        |m| {
                            let mut r = router.clone();
                            r.prototypes.log_vars = m.clone();
                            objective(&r)
                        },
                        &router.prototypes.log_vars,
                        h,
                    )
                    .unwrap(),
                    "log vars",
                );
            }
        }
    }

    #[test]
    fn alignment_never_reaches_the_encoder() {
        let (router, x, noise, mut settings) = setup(5, MetricKind::Cosine);
        settings.weights = LprWeights {
            beta_rs: 1.0,
            beta_div: 0.0,
            beta_align: 1.0,
            beta_kl: 0.0,
        };
        let (_, g) = lpr_losses_and_grads(&router, &x, &settings, Some(noise)).unwrap();
        assert_eq!(g.encoder.w1.sum_sq(), 0.0);
        assert_eq!(g.encoder.b1.sum_sq(), 0.0);
        assert!(g.prototypes.means.sum_sq() > 0.0);
    }
}

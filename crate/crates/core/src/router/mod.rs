//! The latent prototype router and the linear baseline router.

mod ema;
mod encoder;
mod losses;
mod lpr;
mod prototypes;
mod routing;

pub use ema::{ema_update, EmaMode};
pub use encoder::{
    encode, encode_with_noise, encoder_backward, Encoded, EncoderMode, EncoderParams,
    EncoderUpstream, LatentGaussian, VariationalHead,
};
pub use losses::{
    alignment_loss, alignment_loss_grad, diversity_loss, diversity_loss_grad, kl_loss,
    kl_loss_grad, AlignmentGrad, DiversityKind, DiversityTarget,
};
pub use lpr::{
    lpr_losses_and_grads, LprBackward, LprForward, LprLosses, LprRouter, LprSettings, LprWeights,
};
pub use prototypes::{hyperspherical_init, project_unit_ball, ExpertPrototypes, InitKind};
pub use routing::{
    gating_backward, route, route_from_scores, top_k_indices, vanilla_route, RoutingDecision,
};

//! A small mixture-of-experts regression model and its synthetic corpus.

mod corpus;
mod expert;
mod layer;
mod model;

pub use corpus::{zipf_weights, Batch, CorpusConfig, SyntheticCorpusSpec};
pub use expert::{ExpertCache, ExpertNet};
pub use layer::{
    aux_balance_loss, aux_balance_loss_grad, moe_backward, moe_forward, mse_loss, mse_loss_grad,
    ExpertDispatch, MoeOutput,
};
pub use model::{
    LayerForward, ModelConfig, ModelForward, ModelLosses, MoeLayer, MoeModel, ParamClass, Router,
    RouterForward, RouterKind,
};

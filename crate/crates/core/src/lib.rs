//! Latent prototype routing for mixture-of-experts layers.

pub mod balance;
pub mod error;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod router;
pub mod train;

pub use error::{LprError, Result};
pub use numerics::{Matrix, RngState};

//! Dense linear algebra, activations, seeded sampling and the
//! finite-difference gradient oracle.

mod activations;
mod diagnostics;
mod gradcheck;
mod matrix;
mod rng;

pub use activations::{
    rms_norm, rms_norm_rows, rms_norm_rows_backward, sigmoid, silu, silu_grad, softmax_in_place,
    softmax_rows, softmax_rows_backward, RMS_EPS,
};
pub use diagnostics::score_variance;
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_STEP};
pub use matrix::{dot, norm, sq_dist, Matrix};
pub use rng::{sample_gaussian, RngState};

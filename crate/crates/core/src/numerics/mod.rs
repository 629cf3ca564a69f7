//! Dense linear algebra and the differentiable primitives the ARNN graph needs.
//!
//! Each primitive comes as a forward function plus a matching backward
//! function that maps an upstream gradient to the gradient of its input.

mod matrix;
mod ops;
mod param;
mod rng;

pub use matrix::{mac_count, reset_mac_count, Matrix};
pub use ops::{
    dropout, dropout_backward, layer_norm, layer_norm_backward, sigmoid, softmax_rows,
    softmax_rows_backward, tanh_m, DropoutMask, LayerNormCache, LAYER_NORM_EPS,
};
pub use param::Param;
pub use rng::Rng;

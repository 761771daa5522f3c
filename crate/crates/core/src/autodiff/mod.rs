//! Minimal dense-tensor reverse-mode differentiation over the operation set
//! the model needs.

mod conv;
mod gradcheck;
mod norm;
mod ops;
mod params;
mod sample;
mod tape;

pub use conv::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, conv_out_extent,
    depthwise_forward,
};
pub use gradcheck::{finite_difference_entries, finite_difference_gradient, relative_error};
pub use ops::{matmul, sigmoid};
pub use params::{join, Graph, ModelParams, ParamInit};
pub use tape::{Gradients, Tape, Var};

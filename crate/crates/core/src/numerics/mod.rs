//! Minimal dense tensors with hand-written forward and backward passes.

mod gradcheck;
mod layers;
mod tensor;

pub use gradcheck::{check_gradient, relative_error, GradCheck};
pub use layers::{
    conv2d_backward, conv2d_forward, conv_output_dims, fixed_linear_backward, fixed_linear_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, sigmoid, sigmoid_backward,
    sigmoid_forward, Conv2dGrads, ConvParams, FixedLinear, MaxPoolIndices,
};
pub use tensor::Tensor;
pub(crate) use layers::ConvGeometry;

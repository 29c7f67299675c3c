//! Numeric kernels shared by the tape and the inference paths. Every kernel
//! is a pure function over tensors; gradients live beside their forwards.

pub mod conv;
pub mod dense;
pub mod spatial;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use dense::{
    bce_with_logits_mean, channel_affine_backward, channel_affine_forward, cross_entropy_mean,
    l1_loss_mean, linear_backward, linear_forward, relu, relu_backward, sigmoid, sigmoid_backward,
    softmax_rows,
};
pub use spatial::{
    bilinear_down2x, bilinear_down2x_backward, bilinear_resize, gaussian_blur2d, global_avg_pool,
    global_avg_pool_backward, max_pool2x, max_pool2x_backward, roll2d,
};

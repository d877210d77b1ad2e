//! Forward kernels (as `Tape` methods) and their backward counterparts.

mod activation;
mod basic;
mod conv;
mod linalg;
mod loss;
mod norm;
mod pool;

pub use activation::Activation;
pub use conv::ConvGeometry;
pub use norm::BatchNormMode;

pub(crate) use activation::activation_backward;
pub(crate) use basic::{
    channel_gate_backward, hadamard, permute_inverse, reduce_leading, scale_leading,
    slice_backward, split_axis,
};
pub(crate) use conv::conv2d_backward;
pub(crate) use linalg::{bmm_backward, linear_backward, matmul_backward};
pub(crate) use loss::{cross_entropy_backward, softmax_backward};
pub(crate) use norm::{batch_norm_backward, layer_norm_backward};
pub(crate) use pool::{avg_pool_backward, global_avg_pool_backward, max_pool_backward};

//! Forward and backward passes of the primitive layers.

pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;

pub use batchnorm::{batchnorm_backward, BatchNormState, BnCache, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_macs, conv2d_output_shape, ConvGrads};
pub use dense::{linear_backward, linear_forward, relu_backward, relu_forward, softmax_xent};
pub use pool::{
    adaptive_avg_pool_backward, adaptive_avg_pool_forward, global_avg_pool, maxpool_backward,
    maxpool_forward, PoolWindow,
};

//! Primitive operators. Every forward has a matching explicit backward.
//!
//! Feature vectors (`(B, C)` in the math) are `(B, C, 1, 1)` tensors.

mod activation;
mod conv;
mod elementwise;
mod linear;
mod norm;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, Activation};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use elementwise::{
    broadcast_shape, concat_channels, mul_broadcast, mul_broadcast_backward, reduce_to_shape, slice_channels,
    split_channels,
};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use norm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, Mode, RunningStats, BN_EPS, BN_MOMENTUM,
};
pub use pool::{
    channel_max, channel_max_backward, channel_mean, channel_mean_backward, global_avg_pool, global_avg_pool_backward,
    global_max_pool, global_max_pool_backward,
};

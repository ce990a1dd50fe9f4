//! Tensor-level layers with hand-written backward passes.

mod basic;
mod conv;
mod resample;

pub use basic::{
    concat_channels, global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward,
    relu, relu_backward, softmax_channels, softmax_channels_backward, split_channels, Linear,
    PoolCache,
};
pub use conv::{Conv2dParams, ConvCache};
pub use resample::{resize_bilinear, resize_nearest, upsample2, upsample2_backward, AxisInterp};

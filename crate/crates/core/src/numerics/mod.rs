//! Differentiable primitives: convolution, batch normalization,
//! activations, pooling, and bilinear resampling. Every layer caches what
//! its backward pass needs on `forward` and consumes it on `backward`.

mod activation;
mod batchnorm;
mod conv;
mod pool;
mod resize;
mod tensor;

pub use activation::{activation, sigmoid, Act, Activation};
pub use batchnorm::{batch_norm, BatchNorm2d, RunningStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use conv::{conv2d, conv2d_backward, Conv2d, ConvSpec};
pub use pool::{
    channel_pool, directional_avg_backward, directional_pool, directional_pool_with_argmax, global_pool,
    max_pool2d, scatter_argmax, Axis, MaxPool2d, PoolMode, Pooled,
};
pub use resize::{bilinear_upsample, resize_bilinear, resize_bilinear_backward, Upsample};
pub use tensor::{FeatureMap, Scalar, Shape};

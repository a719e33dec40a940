//! Differentiable operators on [`Var`](crate::autograd::Var)s.
//!
//! Each submodule also exposes the plain forward kernels so they can be
//! benchmarked and checked against brute-force references.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, ConvSpec};
pub use norm::{batch_norm, layer_norm, BatchStats, NORM_EPS};
pub use pointwise::{
    add, concat, interleave_channels, maximum, mul, relu, sigmoid, sum, weighted_sum,
};
pub use pool::{avg_pool, global_avg_pool, max_pool2};
pub use resample::bilinear_upsample2;

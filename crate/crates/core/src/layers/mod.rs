//! Network building blocks.

pub mod block;
pub mod level;
pub mod lut;
pub mod matrix;
pub mod pool;
pub mod spline;

pub use block::{concat_position, residual_block, LinearLayer, ResidualBlock};
pub use level::LevelGraph;
pub use lut::{build_lut, conv_forward, conv_forward_spline, LutConvLayer};
pub use matrix::{relu, Features, Matrix};
pub use pool::{feature_prunable, max_pool, voxel_max, PoolCache, PoolSpec, Voxel};
pub use spline::{spline_weight, BatchNormParams, EdgeAttribute, LayerScale, SplineKernel, KERNEL_SIZE};

//! Weakly-supervised segmentation of plant shoot point clouds.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`cloud`]: point-cloud model, file I/O, voxel grids and radius/kNN indexing
//! - [`sampling`]: farthest point sampling and sparse weak-label generation
//! - [`augment`]: seeded geometric augmentations used to build two views of a cloud
//! - [`nn`]: a small reverse-mode differentiable kernel, the point backbone, heads,
//!   SGD with polynomial decay and binary checkpoints
//! - [`vib`]: the viewpoint-bottleneck self-supervised objective and pretraining loop
//! - [`segment`]: sparse-label fine-tuning (semantic and offset heads) and inference
//! - [`cluster`]: ball clustering on original and shifted coordinates
//! - [`metrics`]: semantic metrics, instance AP and regression statistics
//! - [`traits`]: stem diameter, leaf length and leaf width extraction
//! - [`synth`]: procedural labeled plants with analytic ground truth
//! - [`config`]: flat `key=value` run configuration

pub mod augment;
pub mod cloud;
pub mod cluster;
pub mod config;
mod error;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod segment;
pub mod synth;
pub mod traits;
pub mod vib;

pub use cloud::{PointCloud, SpatialIndex, VoxelMap};
pub use error::{Error, Result};
pub use sampling::WeakLabels;

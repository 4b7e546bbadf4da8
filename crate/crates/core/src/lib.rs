//! CPU sparse-voxel multi-task lidar perception: a rulebook sparse
//! convolution engine, a joint segmentation/detection network with
//! multi-scale aggregation and instance-aware refinement, training with
//! learned task weighting, and evaluation.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod cli;
pub mod config;
pub mod error;
pub mod heads;
pub mod iarm;
pub mod io;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod voxel;

pub use boxes::Box9;
pub use error::{Error, Result};
pub use mat::Mat;
pub use real::Real;

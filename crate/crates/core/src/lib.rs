//! Articulated 3D Gaussian splatting for skinned subjects.
//!
//! Canonical-space Gaussians are posed with linear blend skinning, drawn by a
//! differentiable tile rasterizer and optimized together with two small
//! deformation networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod density;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod kdtree;
pub mod kinematics;
pub mod loss;
pub mod model;
pub mod nets;
pub mod rasterizer;
pub mod rotation;
pub mod sh;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

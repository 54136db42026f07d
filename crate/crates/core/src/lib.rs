//! Multi-view voxel and depth reconstruction through differentiable
//! projection and unprojection.

pub mod classical;
pub mod diffops;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod geometry;
pub mod nnkit;
pub mod synthgen;
pub mod tensorio;

pub use error::{Error, Result};
pub use features::{FeatureGrid, FeatureMap};
pub use geometry::{Camera, Intrinsics, Pose, VoxelGridSpec};

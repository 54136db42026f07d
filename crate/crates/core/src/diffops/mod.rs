//! Differentiable 2D↔3D operators.
//!
//! All operators are linear in the feature values they move between rasters
//! and grids; each has a vector-Jacobian product with respect to those values
//! only. Camera parameters and sample positions are constants.
//!
//! - [`bilinear_sample`]: zero-padded bilinear lookup in a [`FeatureMap`].
//! - [`unproject`]: every voxel center is projected into the image and takes
//!   the bilinearly interpolated feature found there, so features of one pixel
//!   are replicated along its viewing ray.
//! - [`project`]: every pixel ray is sampled on equally spaced depth planes
//!   and the samples are stacked along channels in ascending depth.
//!
//! [`FeatureMap`]: crate::features::FeatureMap

mod bilinear;
mod project;
mod unproject;

pub use bilinear::{bilinear_sample, bilinear_sample_vjp, BilinearTaps};
pub use project::{plane_depths, project, project_vjp, round_half_down, Interp, ProjectPlan};
pub use unproject::{unproject, unproject_vjp, GeomFeatureConfig, UnprojectPlan};

//! Dense 2D feature rasters and 3D feature grids.

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;

/// `height × width × channels` raster, channel-last, row-major (row = `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, v: usize, u: usize) -> &[f64] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, v: usize, u: usize) -> &mut [f64] {
        let o = (v * self.width + u) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn get(&self, v: usize, u: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels + c]
    }

    pub fn set(&mut self, v: usize, u: usize, c: usize, value: f64) {
        self.data[(v * self.width + u) * self.channels + c] = value;
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Single channel copy.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect()
    }

    /// Rec. 601 luma of a 3-channel image.
    pub fn to_gray(&self) -> Result<Vec<f64>> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "grayscale conversion needs 3 channels, got {}",
                self.channels
            )));
        }
        Ok(self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect())
    }
}

/// `V³ × channels` grid, voxel-major in the [`VoxelGridSpec`] enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(spec: VoxelGridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.num_voxels() * channels {
            return Err(Error::shape(format!(
                "grid of {}^3 x {channels} needs {} values, got {}",
                spec.resolution,
                spec.num_voxels() * channels,
                data.len()
            )));
        }
        Ok(Self {
            spec,
            channels,
            data,
        })
    }

    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            data: vec![0.0; spec.num_voxels() * channels],
        }
    }

    pub fn filled(spec: VoxelGridSpec, channels: usize, value: f64) -> Self {
        Self {
            spec,
            channels,
            data: vec![value; spec.num_voxels() * channels],
        }
    }

    pub fn voxel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn voxel_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> &[f64] {
        self.voxel(self.spec.linear_index(i, j, k))
    }

    pub fn same_layout(&self, other: &FeatureGrid) -> bool {
        self.spec == other.spec && self.channels == other.channels
    }
}

use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::geometry::VoxelGridSpec;

/// Dense row-major `f64` array. Spatial tensors are channel-last:
/// `[H, W, C]` for rasters and `[D, H, W, C]` for grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last (channel) axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of positions, i.e. everything but the channel axis.
    pub fn positions(&self) -> usize {
        self.len() / self.channels().max(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

impl From<FeatureMap> for Tensor {
    fn from(f: FeatureMap) -> Self {
        Tensor {
            shape: vec![f.height, f.width, f.channels],
            data: f.data,
        }
    }
}

impl From<FeatureGrid> for Tensor {
    fn from(g: FeatureGrid) -> Self {
        let n = g.spec.resolution;
        Tensor {
            shape: vec![n, n, n, g.channels],
            data: g.data,
        }
    }
}

impl Tensor {
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        match self.shape[..] {
            [h, w, c] => FeatureMap::new(h, w, c, self.data.clone()),
            _ => Err(Error::shape(format!("{:?} is not an HxWxC raster", self.shape))),
        }
    }

    pub fn to_feature_grid(&self, spec: VoxelGridSpec) -> Result<FeatureGrid> {
        let n = spec.resolution;
        match self.shape[..] {
            [a, b, c, ch] if a == n && b == n && c == n => {
                FeatureGrid::new(spec, ch, self.data.clone())
            }
            _ => Err(Error::shape(format!(
                "{:?} is not a {n}^3 grid",
                self.shape
            ))),
        }
    }
}

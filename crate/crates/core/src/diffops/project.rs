use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::geometry::{camera_z_range, Camera, VoxelGridSpec};

/// 3D sampling rule used by [`project`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interp {
    #[default]
    Nearest,
    Trilinear,
}

/// Depth planes at bin midpoints of the camera's z-range over the grid cube,
/// in ascending order.
pub fn plane_depths(spec: &VoxelGridSpec, cam: &Camera, n_planes: usize) -> Vec<f64> {
    let (near, far) = camera_z_range(spec, &cam.pose);
    let step = (far - near) / n_planes as f64;
    (0..n_planes)
        .map(|k| near + (k as f64 + 0.5) * step)
        .collect()
}

/// Nearest index with ties rounded down: 2.5 maps to 2, 2.5 + ε to 3.
#[inline]
pub fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

#[derive(Clone, Copy)]
struct GridTaps {
    index: [u32; 8],
    weight: [f64; 8],
    len: u8,
}

impl GridTaps {
    const EMPTY: Self = Self {
        index: [0; 8],
        weight: [0.0; 8],
        len: 0,
    };

    fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.len as usize;
        self.index[..n]
            .iter()
            .map(|&i| i as usize)
            .zip(self.weight[..n].iter().copied())
    }
}

/// Gather footprint of a projection: for each (pixel, plane) the voxels sampled.
pub struct ProjectPlan {
    spec: VoxelGridSpec,
    height: usize,
    width: usize,
    n_planes: usize,
    taps: Vec<GridTaps>,
}

impl ProjectPlan {
    pub fn new(cam: &Camera, spec: &VoxelGridSpec, n_planes: usize, interp: Interp) -> Result<Self> {
        if n_planes == 0 {
            return Err(Error::invalid("projection needs at least one depth plane"));
        }
        let k = &cam.intrinsics;
        let depths = plane_depths(spec, cam, n_planes);
        let n = spec.resolution;
        let nf = n as f64;
        let mut taps = Vec::with_capacity(k.height * k.width * n_planes);
        for v in 0..k.height {
            for u in 0..k.width {
                for &z in &depths {
                    let x = cam.point_at_depth(u as f64, v as f64, z);
                    let mut t = GridTaps::EMPTY;
                    if spec.contains(&x) {
                        let g = spec.continuous_index(&x);
                        match interp {
                            Interp::Nearest => {
                                let idx = [g.x, g.y, g.z].map(|a| {
                                    round_half_down(a).clamp(0.0, nf - 1.0) as usize
                                });
                                t.index[0] = spec.linear_index(idx[0], idx[1], idx[2]) as u32;
                                t.weight[0] = 1.0;
                                t.len = 1;
                            }
                            Interp::Trilinear => {
                                let base = [g.x.floor(), g.y.floor(), g.z.floor()];
                                let frac = [g.x - base[0], g.y - base[1], g.z - base[2]];
                                for corner in 0..8 {
                                    let mut w = 1.0;
                                    let mut ijk = [0usize; 3];
                                    let mut inside = true;
                                    for a in 0..3 {
                                        let hi = corner >> a & 1 == 1;
                                        let c = base[a] + if hi { 1.0 } else { 0.0 };
                                        w *= if hi { frac[a] } else { 1.0 - frac[a] };
                                        if c < 0.0 || c > nf - 1.0 {
                                            inside = false;
                                        } else {
                                            ijk[a] = c as usize;
                                        }
                                    }
                                    if inside && w != 0.0 {
                                        let l = t.len as usize;
                                        t.index[l] = spec.linear_index(ijk[0], ijk[1], ijk[2]) as u32;
                                        t.weight[l] = w;
                                        t.len += 1;
                                    }
                                }
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
        Ok(Self {
            spec: *spec,
            height: k.height,
            width: k.width,
            n_planes,
            taps,
        })
    }

    pub fn spec(&self) -> VoxelGridSpec {
        self.spec
    }

    pub fn output_channels(&self, grid_channels: usize) -> usize {
        self.n_planes * grid_channels
    }

    pub fn forward(&self, grid: &FeatureGrid) -> Result<FeatureMap> {
        if grid.spec != self.spec {
            return Err(Error::shape("grid spec does not match the projection plan"));
        }
        let c = grid.channels;
        let mut out = FeatureMap::zeros(self.height, self.width, self.n_planes * c);
        for (t, o) in self.taps.iter().zip(out.data.chunks_exact_mut(c.max(1))) {
            for (idx, w) in t.iter() {
                for (oc, g) in o.iter_mut().zip(grid.voxel(idx)) {
                    *oc += w * g;
                }
            }
        }
        Ok(out)
    }

    pub fn vjp(&self, grid_channels: usize, upstream: &FeatureMap) -> Result<FeatureGrid> {
        let c = grid_channels;
        if upstream.height != self.height
            || upstream.width != self.width
            || upstream.channels != self.n_planes * c
        {
            return Err(Error::shape(format!(
                "upstream is {:?}, projection produces {:?}",
                upstream.shape(),
                [self.height, self.width, self.n_planes * c]
            )));
        }
        let mut grad = FeatureGrid::zeros(self.spec, c);
        for (t, up) in self.taps.iter().zip(upstream.data.chunks_exact(c.max(1))) {
            for (idx, w) in t.iter() {
                for (g, u) in grad.voxel_mut(idx).iter_mut().zip(up) {
                    *g += w * u;
                }
            }
        }
        Ok(grad)
    }
}

/// Sample the grid on `n_planes` equally spaced camera-frame depth planes
/// along every pixel ray. Channel block `k` holds the samples of plane `k`,
/// planes in ascending depth. Samples outside the grid cube are zero.
pub fn project(
    grid: &FeatureGrid,
    cam: &Camera,
    n_planes: usize,
    interp: Interp,
) -> Result<FeatureMap> {
    ProjectPlan::new(cam, &grid.spec, n_planes, interp)?.forward(grid)
}

pub fn project_vjp(
    grid: &FeatureGrid,
    cam: &Camera,
    n_planes: usize,
    interp: Interp,
    upstream: &FeatureMap,
) -> Result<FeatureGrid> {
    ProjectPlan::new(cam, &grid.spec, n_planes, interp)?.vjp(grid.channels, upstream)
}

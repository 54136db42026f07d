use crate::diffops::bilinear::BilinearTaps;
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::geometry::{project_point, Camera, VoxelGridSpec};

/// Geometric channels appended to every unprojected voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GeomFeatureConfig {
    /// Camera-frame depth of the voxel center (raw, unnormalized).
    pub append_depth: bool,
    /// Unit world-frame direction from the camera center to the voxel center.
    pub append_ray_dir: bool,
}

impl GeomFeatureConfig {
    pub const NONE: Self = Self {
        append_depth: false,
        append_ray_dir: false,
    };
    pub const ALL: Self = Self {
        append_depth: true,
        append_ray_dir: true,
    };

    pub fn extra_channels(&self) -> usize {
        usize::from(self.append_depth) + 3 * usize::from(self.append_ray_dir)
    }
}

/// Per-voxel sampling footprint of one camera, shared by forward and adjoint.
pub struct UnprojectPlan {
    spec: VoxelGridSpec,
    height: usize,
    width: usize,
    taps: Vec<Option<BilinearTaps>>,
    geom: Vec<[f64; 4]>,
}

impl UnprojectPlan {
    pub fn new(cam: &Camera, spec: &VoxelGridSpec) -> Self {
        let k = &cam.intrinsics;
        let origin = cam.pose.center();
        let n = spec.resolution;
        let mut taps = Vec::with_capacity(spec.num_voxels());
        let mut geom = Vec::with_capacity(spec.num_voxels());
        for i in 0..n {
            for j in 0..n {
                for kk in 0..n {
                    let x = spec.voxel_center(i, j, kk);
                    let p = project_point(&x, k, &cam.pose);
                    taps.push(p.valid.then(|| BilinearTaps::new(k.height, k.width, p.u, p.v)));
                    let d = x - origin;
                    let d = if d.norm() > 0.0 { d.normalize() } else { d };
                    geom.push([p.z, d.x, d.y, d.z]);
                }
            }
        }
        Self {
            spec: *spec,
            height: k.height,
            width: k.width,
            taps,
            geom,
        }
    }

    pub fn spec(&self) -> VoxelGridSpec {
        self.spec
    }

    fn check_map(&self, f: &FeatureMap) -> Result<()> {
        if f.height != self.height || f.width != self.width {
            return Err(Error::shape(format!(
                "feature map is {}x{}, camera raster is {}x{}",
                f.height, f.width, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &FeatureMap, gcfg: GeomFeatureConfig) -> Result<FeatureGrid> {
        self.check_map(f)?;
        let c = f.channels;
        let out_c = c + gcfg.extra_channels();
        let mut grid = FeatureGrid::zeros(self.spec, out_c);
        for ((taps, geom), out) in self
            .taps
            .iter()
            .zip(&self.geom)
            .zip(grid.data.chunks_exact_mut(out_c))
        {
            if let Some(t) = taps {
                t.gather(&f.data, c, &mut out[..c]);
            }
            let mut o = c;
            if gcfg.append_depth {
                out[o] = geom[0];
                o += 1;
            }
            if gcfg.append_ray_dir {
                out[o..o + 3].copy_from_slice(&geom[1..4]);
            }
        }
        Ok(grid)
    }

    /// Adjoint with respect to the feature channels; geometric channels of
    /// `upstream` carry no gradient.
    pub fn vjp(&self, feature_channels: usize, upstream: &FeatureGrid) -> Result<FeatureMap> {
        if upstream.spec != self.spec || upstream.channels < feature_channels {
            return Err(Error::shape("upstream grid does not match the unprojection"));
        }
        let c = feature_channels;
        let mut grad = FeatureMap::zeros(self.height, self.width, c);
        for (taps, up) in self.taps.iter().zip(upstream.data.chunks_exact(upstream.channels)) {
            if let Some(t) = taps {
                t.scatter(&up[..c], c, &mut grad.data);
            }
        }
        Ok(grad)
    }
}

/// Lift a feature map into the voxel grid by sampling it at every projected
/// voxel center. Voxels projecting outside the raster or behind the camera
/// get zero features.
pub fn unproject(
    f: &FeatureMap,
    cam: &Camera,
    spec: &VoxelGridSpec,
    gcfg: GeomFeatureConfig,
) -> Result<FeatureGrid> {
    UnprojectPlan::new(cam, spec).forward(f, gcfg)
}

pub fn unproject_vjp(
    f: &FeatureMap,
    cam: &Camera,
    spec: &VoxelGridSpec,
    gcfg: GeomFeatureConfig,
    upstream: &FeatureGrid,
) -> Result<FeatureMap> {
    if upstream.channels != f.channels + gcfg.extra_channels() {
        return Err(Error::shape(format!(
            "upstream has {} channels, unprojection produces {}",
            upstream.channels,
            f.channels + gcfg.extra_channels()
        )));
    }
    let plan = UnprojectPlan::new(cam, spec);
    plan.check_map(f)?;
    plan.vjp(f.channels, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Mat3, Pose, Vec3};

    fn cam_at_minus_two(size: usize, focal: f64) -> Camera {
        Camera::new(
            Intrinsics::centered(focal, size, size).unwrap(),
            Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap(),
        )
    }

    #[test]
    fn constant_map_fills_grid() {
        let cam = cam_at_minus_two(32, 30.0);
        let spec = VoxelGridSpec::unit(8);
        let f = FeatureMap::filled(32, 32, 2, 0.7);
        let g = unproject(&f, &cam, &spec, GeomFeatureConfig::NONE).unwrap();
        assert!(g.data.iter().all(|&x| (x - 0.7).abs() < 1e-14));
    }

    #[test]
    fn geometric_channels() {
        let cam = cam_at_minus_two(32, 30.0);
        let spec = VoxelGridSpec::unit(4);
        let f = FeatureMap::filled(32, 32, 1, 1.0);
        let g = unproject(&f, &cam, &spec, GeomFeatureConfig::ALL).unwrap();
        assert_eq!(g.channels, 5);
        let x = spec.voxel_center(1, 2, 3);
        let v = g.at(1, 2, 3);
        assert!((v[1] - (x.z + 2.0)).abs() < 1e-14);
        let d = (x - Vec3::new(0.0, 0.0, -2.0)).normalize();
        assert!((Vec3::new(v[2], v[3], v[4]) - d).norm() < 1e-14);
    }

    #[test]
    fn voxels_on_one_ray_share_features() {
        // Camera on the grid's diagonal axis through voxel centers.
        let spec = VoxelGridSpec::unit(8);
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.0625, 0.0625, 2.0)).unwrap();
        let cam = Camera::new(Intrinsics::centered(30.0, 31, 31).unwrap(), pose);
        let mut f = FeatureMap::zeros(31, 31, 2);
        for (n, x) in f.data.iter_mut().enumerate() {
            *x = (n as f64 * 0.37).sin();
        }
        let g = unproject(&f, &cam, &spec, GeomFeatureConfig::ALL).unwrap();
        // Voxels (3, 3, k) all lie on the optical axis x = y = -0.0625.
        let a = g.at(3, 3, 1);
        let b = g.at(3, 3, 6);
        assert_eq!(&a[..2], &b[..2]);
        assert!(a[2] != b[2]);
    }

    #[test]
    fn single_voxel_upstream_touches_at_most_four_pixels() {
        let cam = cam_at_minus_two(24, 20.0);
        let spec = VoxelGridSpec::unit(6);
        let f = FeatureMap::zeros(24, 24, 1);
        let mut up = FeatureGrid::zeros(spec, 1);
        up.data[spec.linear_index(2, 4, 1)] = 1.0;
        let g = unproject_vjp(&f, &cam, &spec, GeomFeatureConfig::NONE, &up).unwrap();
        let touched: Vec<usize> = (0..g.data.len()).filter(|&i| g.data[i] != 0.0).collect();
        assert!(!touched.is_empty() && touched.len() <= 4);
        let p = cam.project(&spec.voxel_center(2, 4, 1));
        for idx in touched {
            let (v, u) = (idx / 24, idx % 24);
            assert!((u as f64 - p.u).abs() < 1.0 && (v as f64 - p.v).abs() < 1.0);
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let cam = cam_at_minus_two(16, 20.0);
        let spec = VoxelGridSpec::unit(4);
        let f = FeatureMap::zeros(15, 16, 1);
        assert!(unproject(&f, &cam, &spec, GeomFeatureConfig::NONE).is_err());
        let f = FeatureMap::zeros(16, 16, 1);
        let up = FeatureGrid::zeros(spec, 3);
        assert!(unproject_vjp(&f, &cam, &spec, GeomFeatureConfig::NONE, &up).is_err());
    }
}

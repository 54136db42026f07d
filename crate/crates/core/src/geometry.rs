//! Pinhole cameras, voxel grid conventions and point projection.
//!
//! Conventions used everywhere in the crate:
//!
//! - Extrinsics map world to camera: `x_cam = R * X + t`.
//! - The camera looks down `+z`; pixel `(u, v)` is `(column, row)`.
//! - Integer pixel coordinates sit on sample centers, so the first sample of a
//!   raster is at `(0, 0)` and the last one at `(width - 1, height - 1)`.
//! - Voxel `(i, j, k)` indexes the `x`, `y` and `z` axes respectively and is
//!   enumerated row-major with `i` slowest.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Points with camera-frame depth at or below this are treated as behind the camera.
pub const Z_EPS: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the principal point at the raster center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics of a raster produced by `stride`-strided same-padded
    /// convolutions. Output sample `i` is centered on input sample `stride * i`.
    pub fn downsampled(&self, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// World-to-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let p = Self {
            rotation,
            translation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        let det = r.determinant();
        if ortho <= ORTHO_TOL && (det - 1.0).abs() <= ORTHO_TOL {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "rotation is not a proper rotation (orthogonality error {ortho:e}, det {det})"
            )))
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing axis (camera `+z`) in world coordinates.
    pub fn viewing_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn to_world(&self, x_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (x_cam - self.translation)
    }

    /// Camera at `eye` looking at `target`, with `up` projecting to the top of
    /// the image. Falls back to world `+z` as up when the view direction is
    /// parallel to `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at eye and target coincide"));
        }
        let forward = forward.normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::z());
            if right.norm() < 1e-9 {
                right = forward.cross(&Vec3::x());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }
}

/// A calibrated camera: intrinsics plus world-to-camera pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn project(&self, x: &Vec3) -> PixelProjection {
        project_point(x, &self.intrinsics, &self.pose)
    }

    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        ray_through_pixel(u, v, &self.intrinsics, &self.pose)
    }

    /// World point on the ray through `(u, v)` whose camera-frame depth is `z`.
    pub fn point_at_depth(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let k = &self.intrinsics;
        let x_cam = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        self.pose.to_world(&x_cam)
    }

    /// Same pose, intrinsics rescaled for a strided feature raster.
    pub fn downsampled(&self, stride: usize) -> Self {
        Self {
            intrinsics: self.intrinsics.downsampled(stride),
            pose: self.pose,
        }
    }
}

/// Axis-aligned metric cube split into `resolution³` voxels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub resolution: usize,
    pub center: Vec3,
    pub side: f64,
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            center: Vec3::zeros(),
            side: 1.0,
        }
    }
}

impl VoxelGridSpec {
    pub fn new(resolution: usize, center: Vec3, side: f64) -> Result<Self> {
        if resolution == 0 || !(side > 0.0) {
            return Err(Error::invalid(format!(
                "voxel grid needs resolution >= 1 and side > 0 (got {resolution}, {side})"
            )));
        }
        Ok(Self {
            resolution,
            center,
            side,
        })
    }

    /// Unit cube at the origin with the given resolution.
    pub fn unit(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn voxel_size(&self) -> f64 {
        self.side / self.resolution as f64
    }

    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.resolution + j) * self.resolution + k
    }

    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let n = self.resolution;
        (idx / (n * n), (idx / n) % n, idx % n)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let n = self.resolution as f64;
        let off = |a: usize| self.side * ((a as f64 + 0.5) / n - 0.5);
        self.center + Vec3::new(off(i), off(j), off(k))
    }

    /// Continuous index coordinates of a world point; voxel centers are integers.
    pub fn continuous_index(&self, x: &Vec3) -> Vec3 {
        let n = self.resolution as f64;
        (x - self.center) / self.side * n + Vec3::repeat(n / 2.0 - 0.5)
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        let h = self.side / 2.0;
        let d = x - self.center;
        d.x.abs() <= h && d.y.abs() <= h && d.z.abs() <= h
    }

    /// Index of the voxel whose cell contains `x`, if any.
    pub fn containing_voxel(&self, x: &Vec3) -> Option<(usize, usize, usize)> {
        if !self.contains(x) {
            return None;
        }
        let n = self.resolution;
        let g = (x - self.center) / self.side * n as f64 + Vec3::repeat(n as f64 / 2.0);
        let clamp = |a: f64| (a.floor().max(0.0) as usize).min(n - 1);
        Some((clamp(g.x), clamp(g.y), clamp(g.z)))
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.side / 2.0;
        let mut out = [Vec3::zeros(); 8];
        for (n, c) in out.iter_mut().enumerate() {
            let s = |bit: usize| if n >> bit & 1 == 1 { h } else { -h };
            *c = self.center + Vec3::new(s(0), s(1), s(2));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub valid: bool,
}

pub fn project_point(x: &Vec3, cam: &Intrinsics, pose: &Pose) -> PixelProjection {
    let xc = pose.to_camera(x);
    let z = xc.z;
    if z <= Z_EPS {
        return PixelProjection {
            u: f64::NAN,
            v: f64::NAN,
            z,
            valid: false,
        };
    }
    let u = cam.fx * xc.x / z + cam.cx;
    let v = cam.fy * xc.y / z + cam.cy;
    PixelProjection {
        u,
        v,
        z,
        valid: cam.in_bounds(u, v),
    }
}

/// Row-major (`i` slowest) voxel centers.
pub fn voxel_centers(spec: &VoxelGridSpec) -> Vec<Vec3> {
    let n = spec.resolution;
    let mut out = Vec::with_capacity(spec.num_voxels());
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(spec.voxel_center(i, j, k));
            }
        }
    }
    out
}

/// World-frame ray `(origin, unit direction)` through pixel `(u, v)`.
pub fn ray_through_pixel(u: f64, v: f64, cam: &Intrinsics, pose: &Pose) -> (Vec3, Vec3) {
    let d_cam = Vec3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    let dir = (pose.rotation.transpose() * d_cam).normalize();
    (pose.center(), dir)
}

/// Camera-frame depth range spanned by the grid cube.
pub fn camera_z_range(spec: &VoxelGridSpec, pose: &Pose) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in spec.corners() {
        let z = pose.to_camera(&c).z;
        lo = lo.min(z);
        hi = hi.max(z);
    }
    let near = lo.max(Z_EPS);
    (near, hi.max(near))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn example_camera() -> (Intrinsics, Pose) {
        let k = Intrinsics::new(100.0, 100.0, 112.0, 112.0, 224, 224).unwrap();
        let p = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap();
        (k, p)
    }

    #[test]
    fn projects_optical_axis_to_principal_point() {
        let (k, p) = example_camera();
        let pp = project_point(&Vec3::zeros(), &k, &p);
        assert_eq!((pp.u, pp.v, pp.z, pp.valid), (112.0, 112.0, 2.0, true));

        let pp = project_point(&Vec3::new(0.1, 0.0, 0.0), &k, &p);
        assert_abs_diff_eq!(pp.u, 117.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pp.v, 112.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pp.z, 2.0, epsilon = 1e-12);

        let pp = project_point(&Vec3::new(0.0, 0.0, -3.0), &k, &p);
        assert_eq!(pp.z, -1.0);
        assert!(!pp.valid);
    }

    #[test]
    fn voxel_center_examples() {
        let c = voxel_centers(&VoxelGridSpec::unit(1));
        assert_eq!(c, vec![Vec3::zeros()]);

        let c = voxel_centers(&VoxelGridSpec::unit(2));
        assert_eq!(c.len(), 8);
        for p in &c {
            for a in p.iter() {
                assert_eq!(a.abs(), 0.25);
            }
        }
        assert_eq!(c[0], Vec3::repeat(-0.25));
        assert_eq!(c[1], Vec3::new(-0.25, -0.25, 0.25));

        let c = voxel_centers(&VoxelGridSpec::unit(32));
        assert_eq!(c[0], Vec3::repeat(-0.484375));
    }

    #[test]
    fn voxel_centers_are_inside_and_evenly_spaced() {
        let spec = VoxelGridSpec::new(5, Vec3::new(0.3, -1.0, 2.0), 2.5).unwrap();
        let c = voxel_centers(&spec);
        let step = spec.side / 5.0;
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    let p = c[spec.linear_index(i, j, k)];
                    assert!(spec.contains(&p));
                    assert_eq!(spec.containing_voxel(&p), Some((i, j, k)));
                    if k + 1 < 5 {
                        let q = c[spec.linear_index(i, j, k + 1)];
                        assert_abs_diff_eq!((q - p).z, step, epsilon = 1e-12);
                    }
                    let g = spec.continuous_index(&p);
                    assert_abs_diff_eq!(g, Vec3::new(i as f64, j as f64, k as f64), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn principal_ray_inverts_projection() {
        let (k, p) = example_camera();
        let (o, d) = ray_through_pixel(112.0, 112.0, &k, &p);
        assert_abs_diff_eq!(o, Vec3::new(0.0, 0.0, -2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn z_range_examples() {
        let (_, p) = example_camera();
        let spec = VoxelGridSpec::unit(8);
        assert_eq!(camera_z_range(&spec, &p), (1.5, 2.5));

        let inside = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 0.1)).unwrap();
        let (near, far) = camera_z_range(&spec, &inside);
        assert_eq!(near, Z_EPS);
        assert_abs_diff_eq!(far, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn z_range_contains_all_voxel_depths() {
        let spec = VoxelGridSpec::unit(12);
        let pose = Pose::look_at(Vec3::new(1.3, 0.7, -1.4), Vec3::zeros(), Vec3::y()).unwrap();
        let (near, far) = camera_z_range(&spec, &pose);
        for c in voxel_centers(&spec) {
            let z = pose.to_camera(&c).z;
            assert!(z >= near && z <= far);
        }
    }

    #[test]
    fn look_at_points_viewing_axis_at_target() {
        let eye = Vec3::new(0.5, 0.9, -1.7);
        let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap();
        assert_abs_diff_eq!(pose.center(), eye, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.viewing_axis(), -eye.normalize(), epsilon = 1e-12);
        // World up appears towards the top of the image (smaller v).
        let k = Intrinsics::centered(64.0, 64, 64).unwrap();
        let top = project_point(&Vec3::new(0.0, 0.2, 0.0), &k, &pose);
        let mid = project_point(&Vec3::zeros(), &k, &pose);
        assert!(top.v < mid.v);

        let pole = Pose::look_at(Vec3::new(0.0, 3.0, 0.0), Vec3::zeros(), Vec3::y()).unwrap();
        pole.validate().unwrap();
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Pose::new(Mat3::identity() * 2.0, Vec3::zeros()).is_err());
        assert!(Pose::new(-Mat3::identity(), Vec3::zeros()).is_err());
        assert!(VoxelGridSpec::new(0, Vec3::zeros(), 1.0).is_err());
        assert!(VoxelGridSpec::new(4, Vec3::zeros(), 0.0).is_err());
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (0.0..std::f64::consts::TAU, -0.6..0.9f64, 1.5..3.0f64).prop_map(|(az, el, r)| {
            let eye = Vec3::new(r * el.cos() * az.sin(), r * el.sin(), r * el.cos() * az.cos());
            Pose::look_at(eye, Vec3::zeros(), Vec3::y()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn ray_round_trip(pose in arb_pose(), u in 0.0..63.0f64, v in 0.0..63.0f64, s in 0.1..5.0f64) {
            let k = Intrinsics::centered(60.0, 64, 64).unwrap();
            let (o, d) = ray_through_pixel(u, v, &k, &pose);
            prop_assert!((d.norm() - 1.0).abs() < 1e-12);
            let p = project_point(&(o + s * d), &k, &pose);
            prop_assert!((p.u - u).abs() < 1e-6 && (p.v - v).abs() < 1e-6);
        }

        #[test]
        fn projection_reconstructs_point(pose in arb_pose(), x in -0.5..0.5f64, y in -0.5..0.5f64, z in -0.5..0.5f64) {
            let k = Intrinsics::centered(60.0, 64, 64).unwrap();
            let cam = Camera::new(k, pose);
            let x_w = Vec3::new(x, y, z);
            let p = cam.project(&x_w);
            prop_assert!(p.valid);
            prop_assert!((cam.point_at_depth(p.u, p.v, p.z) - x_w).norm() < 1e-9);
            let (o, d) = cam.ray(p.u, p.v);
            let dz = pose.rotation.row(2).transpose().dot(&d);
            prop_assert!((o + p.z / dz * d - x_w).norm() < 1e-9);
        }

        #[test]
        fn projection_is_scale_consistent(pose in arb_pose(), x in -0.5..0.5f64, y in -0.5..0.5f64, lambda in 0.2..4.0f64) {
            let k = Intrinsics::centered(60.0, 64, 64).unwrap();
            let x_w = Vec3::new(x, y, 0.1);
            let xc = pose.to_camera(&x_w);
            let scaled = pose.to_world(&(xc * lambda));
            let a = project_point(&x_w, &k, &pose);
            let b = project_point(&scaled, &k, &pose);
            prop_assert!((a.u - b.u).abs() < 1e-9 && (a.v - b.v).abs() < 1e-9);
        }
    }
}

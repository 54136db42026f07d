//! Procedural posed scenes: signed-distance shapes, sphere-traced renders with
//! exact depth and silhouettes, viewing-sphere cameras and voxelization.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{Camera, Intrinsics, Pose, Vec3, VoxelGridSpec};
use crate::tensorio::{write_scene, SceneData};

pub const MAX_MARCH_STEPS: usize = 256;
pub const HIT_TOLERANCE: f64 = 1e-5;
/// Lattice spacing of the default surface texture, world units.
pub const TEXTURE_SCALE: f64 = 0.04;

/// Constructive solid built from exact primitive distance functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Capped cylinder of total `height` along the unit `axis`.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        height: f64,
    },
    Union {
        parts: Vec<Shape>,
    },
    Subtract {
        base: std::boxed::Box<Shape>,
        cut: std::boxed::Box<Shape>,
    },
}

impl Shape {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Shape::Sphere { center, radius }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3]) -> Self {
        Shape::Box { center, half_extents }
    }

    pub fn cylinder(center: [f64; 3], axis: [f64; 3], radius: f64, height: f64) -> Self {
        let a = Vec3::from(axis).normalize();
        Shape::Cylinder {
            center,
            axis: [a.x, a.y, a.z],
            radius,
            height,
        }
    }

    pub fn union(parts: Vec<Shape>) -> Self {
        Shape::Union { parts }
    }

    pub fn subtract(base: Shape, cut: Shape) -> Self {
        Shape::Subtract {
            base: std::boxed::Box::new(base),
            cut: std::boxed::Box::new(cut),
        }
    }

    /// Signed distance, negative inside. Unions take the minimum and
    /// subtractions `max(a, -b)`, which bounds the true distance.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() - radius,
            Shape::Box { center, half_extents } => {
                let d = p - Vec3::from(*center);
                let q = d.abs() - Vec3::from(*half_extents);
                q.map(|x| x.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Cylinder {
                center,
                axis,
                radius,
                height,
            } => {
                let d = p - Vec3::from(*center);
                let a = Vec3::from(*axis);
                let along = d.dot(&a);
                let radial = (d - along * a).norm();
                let q = [radial - radius, along.abs() - 0.5 * height];
                let outside = (q[0].max(0.0).powi(2) + q[1].max(0.0).powi(2)).sqrt();
                outside + q[0].max(q[1]).min(0.0)
            }
            Shape::Union { parts } => parts
                .iter()
                .map(|s| s.sdf(p))
                .fold(f64::INFINITY, f64::min),
            Shape::Subtract { base, cut } => base.sdf(p).max(-cut.sdf(p)),
        }
    }

    /// Axis-aligned bounds `(min, max)` of the solid.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Shape::Sphere { center, radius } => {
                let c = Vec3::from(*center);
                (c.add_scalar(-radius), c.add_scalar(*radius))
            }
            Shape::Box { center, half_extents } => {
                let c = Vec3::from(*center);
                let h = Vec3::from(*half_extents);
                (c - h, c + h)
            }
            Shape::Cylinder {
                center,
                axis,
                radius,
                height,
            } => {
                let c = Vec3::from(*center);
                let a = Vec3::from(*axis);
                // Extent of a disk of radius r with normal a along each world axis.
                let disk = a.map(|x| radius * (1.0 - x * x).max(0.0).sqrt());
                let cap = a.abs() * (0.5 * height);
                (c - disk - cap, c + disk + cap)
            }
            Shape::Union { parts } => parts.iter().map(Shape::bounds).fold(
                (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
                |(lo, hi), (a, b)| (lo.inf(&a), hi.sup(&b)),
            ),
            Shape::Subtract { base, .. } => base.bounds(),
        }
    }
}

/// Surface albedo as a function of world position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Uniform {
        color: [f64; 3],
    },
    /// 3D checker of cubic cells; each cell's brightness is further scaled
    /// by a hashed random factor in `[1 - noise, 1]`.
    Checker {
        cell: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        noise: f64,
        seed: u64,
    },
    /// Smooth value noise on a cubic lattice of spacing `scale`, blending
    /// between two colors.
    Noise {
        scale: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        seed: u64,
    },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice_value(seed: u64, c: [i64; 3]) -> f64 {
    let mut h = seed;
    for v in c {
        h = splitmix64(h ^ v as u64);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear blend of hashed lattice values with smoothstep weights, in [0, 1].
fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let base = p.map(f64::floor);
    let f = (p - base).map(|t| t * t * (3.0 - 2.0 * t));
    let b = [base.x as i64, base.y as i64, base.z as i64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut c = b;
        for a in 0..3 {
            if corner >> a & 1 == 1 {
                c[a] += 1;
                w *= f[a];
            } else {
                w *= 1.0 - f[a];
            }
        }
        acc += w * lattice_value(seed, c);
    }
    acc
}

impl Texture {
    pub fn albedo(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Texture::Uniform { color } => *color,
            Texture::Checker {
                cell,
                color_a,
                color_b,
                noise,
                seed,
            } => {
                let c = p.map(|x| (x / cell).floor() as i64);
                let parity = (c.x + c.y + c.z).rem_euclid(2) == 0;
                let scale = 1.0 - noise * lattice_value(*seed, [c.x, c.y, c.z]);
                let base = if parity { color_a } else { color_b };
                base.map(|b| b * scale)
            }
            Texture::Noise {
                scale,
                color_a,
                color_b,
                seed,
            } => {
                let t = value_noise(*seed, &(p / *scale));
                [0, 1, 2].map(|i| color_a[i] + t * (color_b[i] - color_a[i]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Direction towards the light, world frame.
    pub direction: [f64; 3],
    pub ambient: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            direction: [0.35, 0.8, -0.5],
            ambient: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub family: Family,
    pub shape: Shape,
    pub texture: Texture,
    pub lighting: Lighting,
    pub seed: u64,
}

impl SceneSpec {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.shape.sdf(p)
    }

    /// True when no surface reaches the boundary of the unit cube, checked by
    /// sampling an `n x n` lattice on each face.
    pub fn fits_unit_cube(&self, n: usize) -> bool {
        let n = n.max(2);
        for axis in 0..3 {
            for side in [-0.5, 0.5] {
                for a in 0..n {
                    for b in 0..n {
                        let s = -0.5 + a as f64 / (n - 1) as f64;
                        let t = -0.5 + b as f64 / (n - 1) as f64;
                        let mut p = Vec3::zeros();
                        p[axis] = side;
                        p[(axis + 1) % 3] = s;
                        p[(axis + 2) % 3] = t;
                        if self.sdf(&p) <= 0.0 {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Generator family, used as the class label in per-class aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sphere,
    Box,
    Composite,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Sphere, Family::Box, Family::Composite];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Box => "box",
            Family::Composite => "composite",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Family::Sphere),
            "box" => Ok(Family::Box),
            "composite" => Ok(Family::Composite),
            _ => Err(Error::invalid(format!("unknown scene family {s:?}"))),
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(-amount..=amount))
}

fn random_shape(family: Family, rng: &mut ChaCha8Rng) -> Shape {
    match family {
        Family::Sphere => {
            let r = rng.random_range(0.25..0.4);
            let c = jitter(rng, 0.42 - r);
            if rng.random_bool(0.5) {
                Shape::sphere(c, r)
            } else {
                let r2 = rng.random_range(0.12..0.2);
                let c2 = [0, 1, 2].map(|a| c[a] + rng.random_range(-1.0..1.0) * (r - 0.5 * r2).min(0.45 - r2 - c[a].abs()).max(0.0));
                Shape::union(vec![Shape::sphere(c, r), Shape::sphere(c2, r2)])
            }
        }
        Family::Box => {
            let h: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.15..0.38));
            let c = [0, 1, 2].map(|a| rng.random_range(-1.0..=1.0) * (0.44 - h[a]).max(0.0));
            if rng.random_bool(0.5) {
                Shape::cuboid(c, h)
            } else {
                let r = rng.random_range(0.08..0.15);
                let top = [c[0], c[1] + h[1], c[2]];
                let height = (0.46 - top[1]).clamp(0.02, 0.2);
                Shape::union(vec![
                    Shape::cuboid(c, h),
                    Shape::cylinder([top[0], top[1] + 0.5 * height - 0.01, top[2]], [0.0, 1.0, 0.0], r, height),
                ])
            }
        }
        Family::Composite => match rng.random_range(0..4) {
            // Block with a spherical cavity opening upwards.
            0 => {
                let h = [rng.random_range(0.3..0.4), rng.random_range(0.2..0.3), rng.random_range(0.3..0.4)];
                let r = rng.random_range(0.22..0.3);
                Shape::subtract(
                    Shape::cuboid([0.0, -0.1, 0.0], h),
                    Shape::sphere([0.0, -0.1 + h[1], 0.0], r),
                )
            }
            // Chair: seat, back and four legs.
            1 => {
                let w = rng.random_range(0.28..0.4);
                let leg = rng.random_range(0.035..0.06);
                let seat_y = rng.random_range(-0.1..0.05);
                let leg_h = 0.5 * (seat_y + 0.45);
                let mut parts = vec![
                    Shape::cuboid([0.0, seat_y, 0.0], [w, 0.04, w]),
                    Shape::cuboid([0.0, 0.5 * (seat_y + 0.44), w - 0.04], [w, 0.5 * (0.44 - seat_y), 0.04]),
                ];
                for (sx, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    parts.push(Shape::cuboid(
                        [sx * (w - leg), seat_y - leg_h, sz * (w - leg)],
                        [leg, leg_h, leg],
                    ));
                }
                Shape::union(parts)
            }
            // Cup: hollow cylinder with a floor.
            2 => {
                let r = rng.random_range(0.25..0.4);
                let h = rng.random_range(0.5..0.8);
                let wall = rng.random_range(0.05..0.09);
                Shape::subtract(
                    Shape::cylinder([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], r, h),
                    Shape::cylinder([0.0, wall + 0.05, 0.0], [0.0, 1.0, 0.0], r - wall, h),
                )
            }
            // Arch: block with a tunnel through it.
            _ => {
                let h = [rng.random_range(0.3..0.42), rng.random_range(0.2..0.35), rng.random_range(0.15..0.3)];
                let tunnel = [h[0] * rng.random_range(0.45..0.65), h[1] * 0.7, 1.0];
                Shape::subtract(
                    Shape::cuboid([0.0, 0.0, 0.0], h),
                    Shape::cuboid([0.0, -h[1], 0.0], tunnel),
                )
            }
        },
    }
}

/// Draw a random scene of `family`; uniform albedo when `textureless`.
pub fn random_scene(family: Family, textureless: bool, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_shape(family, &mut rng);
    let color_a = [0, 1, 2].map(|_| rng.random_range(0.55..0.95));
    let color_b = [0, 1, 2].map(|_| rng.random_range(0.1..0.45));
    let texture = if textureless {
        Texture::Uniform { color: color_a }
    } else {
        Texture::Noise {
            scale: TEXTURE_SCALE,
            color_a,
            color_b,
            seed: rng.random(),
        }
    };
    SceneSpec {
        family,
        shape,
        texture,
        lighting: Lighting::default(),
        seed,
    }
}

/// Cameras on a sphere around the origin, looking at it with world +y up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSampler {
    pub radius: f64,
    /// Degrees, half-open `[lo, hi)`.
    pub azimuth: [f64; 2],
    /// Degrees, closed `[lo, hi]`.
    pub elevation: [f64; 2],
    pub image_size: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub seed: u64,
}

impl Default for ViewSampler {
    fn default() -> Self {
        Self {
            radius: 2.0,
            azimuth: [0.0, 360.0],
            elevation: [-20.0, 30.0],
            image_size: 64,
            focal_factor: 1.0,
            seed: 0,
        }
    }
}

impl ViewSampler {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::centered(self.focal_factor * self.image_size as f64, self.image_size, self.image_size)
    }

    /// Camera at the given angles in degrees.
    pub fn camera_at(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let (az, el) = (azimuth.to_radians(), elevation.to_radians());
        let eye = self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos());
        Ok(Camera::new(self.intrinsics()?, Pose::look_at(eye, Vec3::zeros(), Vec3::y())?))
    }

    /// `n` cameras with their `(azimuth, elevation)` in degrees.
    pub fn sample(&self, n: usize) -> Result<Vec<(Camera, [f64; 2])>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n)
            .map(|_| {
                let az = rng.random_range(self.azimuth[0]..self.azimuth[1]);
                let el = rng.random_range(self.elevation[0]..=self.elevation[1]);
                Ok((self.camera_at(az, el)?, [az, el]))
            })
            .collect()
    }
}

/// Image, camera-frame depth (0 at misses) and silhouette of one view.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: FeatureMap,
    pub depth: FeatureMap,
    pub mask: Vec<u8>,
}

fn normal(scene: &SceneSpec, p: &Vec3) -> Vec3 {
    let e = 1e-5;
    let d = |o: Vec3| scene.sdf(&(p + o)) - scene.sdf(&(p - o));
    let n = Vec3::new(d(Vec3::x() * e), d(Vec3::y() * e), d(Vec3::z() * e));
    if n.norm() > 0.0 {
        n.normalize()
    } else {
        n
    }
}

/// Distance along the unit ray to the first surface hit, if any.
pub fn march(scene: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    // Restrict marching to the sphere enclosing the unit cube.
    let bound = 0.5 * 3f64.sqrt() + 1e-3;
    let b = origin.dot(dir);
    let c = origin.norm_squared() - bound * bound;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let far = -b + disc.sqrt();
    let mut t = (-b - disc.sqrt()).max(0.0);
    for _ in 0..MAX_MARCH_STEPS {
        let d = scene.sdf(&(origin + t * dir));
        if d < HIT_TOLERANCE {
            return Some(t);
        }
        t += d;
        if t > far {
            return None;
        }
    }
    None
}

pub fn render_view(scene: &SceneSpec, cam: &Camera) -> Render {
    let k = &cam.intrinsics;
    let (h, w) = (k.height, k.width);
    let light = Vec3::from(scene.lighting.direction).normalize();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut img = Vec::with_capacity(3 * w);
            let mut depth = Vec::with_capacity(w);
            let mut mask = Vec::with_capacity(w);
            for u in 0..w {
                let (o, d) = cam.ray(u as f64, v as f64);
                match march(scene, &o, &d) {
                    Some(t) => {
                        let x = o + t * d;
                        let n = normal(scene, &x);
                        let shade = scene.lighting.ambient + (1.0 - scene.lighting.ambient) * n.dot(&light).max(0.0);
                        img.extend(scene.texture.albedo(&x).map(|a| (a * shade).clamp(0.0, 1.0)));
                        depth.push(cam.pose.to_camera(&x).z);
                        mask.push(1);
                    }
                    None => {
                        img.extend([1.0; 3]);
                        depth.push(0.0);
                        mask.push(0);
                    }
                }
            }
            (img, depth, mask)
        })
        .collect();
    let mut image = Vec::with_capacity(3 * h * w);
    let mut depth = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for (i, d, m) in rows {
        image.extend(i);
        depth.extend(d);
        mask.extend(m);
    }
    Render {
        image: FeatureMap::new(h, w, 3, image).expect("render size"),
        depth: FeatureMap::new(h, w, 1, depth).expect("render size"),
        mask,
    }
}

/// Voxel occupied iff the distance at its center is `<= 0`.
pub fn voxelize(scene: &SceneSpec, spec: &VoxelGridSpec) -> Vec<u8> {
    (0..spec.num_voxels())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = spec.unravel(idx);
            u8::from(scene.sdf(&spec.voxel_center(i, j, k)) <= 0.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub views: usize,
    pub resolution: usize,
    pub image_size: usize,
    pub textureless: bool,
    /// Per-scene random tilt of the light direction, degrees; 0 keeps the fixed light.
    pub light_jitter_deg: f64,
    /// Families cycled over scene indices.
    pub families: Vec<Family>,
    /// Camera azimuth range, degrees, half-open.
    pub azimuth_deg: [f64; 2],
    /// Camera elevation range, degrees, closed.
    pub elevation_deg: [f64; 2],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 8,
            views: 4,
            resolution: 32,
            image_size: 64,
            textureless: false,
            light_jitter_deg: 0.0,
            families: Family::ALL.to_vec(),
            azimuth_deg: ViewSampler::default().azimuth,
            elevation_deg: ViewSampler::default().elevation,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.views == 0 {
            return Err(Error::invalid("scenes and views must be at least 1"));
        }
        if self.resolution == 0 || self.image_size < 2 {
            return Err(Error::invalid("resolution must be >= 1 and image size >= 2"));
        }
        if !(0.0..=90.0).contains(&self.light_jitter_deg) {
            return Err(Error::invalid("light jitter must be within [0, 90] degrees"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid("at least one scene family is required"));
        }
        let [a0, a1] = self.azimuth_deg;
        let [e0, e1] = self.elevation_deg;
        if !(a0 < a1) || !(e0 <= e1) || e0 < -89.0 || e1 > 89.0 {
            return Err(Error::invalid(format!(
                "bad view ranges: azimuth {:?}, elevation {:?}",
                self.azimuth_deg, self.elevation_deg
            )));
        }
        Ok(())
    }

    fn scene_seed(&self, index: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(index as u64 + 1))
    }
}

/// Scene `index` of a dataset, generated in memory.
pub fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<(SceneSpec, SceneData)> {
    cfg.validate()?;
    let seed = cfg.scene_seed(index);
    let family = cfg.families[index % cfg.families.len()];
    let mut scene = random_scene(family, cfg.textureless, seed);
    if cfg.light_jitter_deg > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x11));
        let axis = nalgebra::Unit::new_normalize(Vec3::from(jitter(&mut rng, 1.0)).add_scalar(1e-9));
        let angle = rng.random_range(0.0..=cfg.light_jitter_deg).to_radians();
        let d = nalgebra::Rotation3::from_axis_angle(&axis, angle) * Vec3::from(scene.lighting.direction);
        scene.lighting.direction = [d.x, d.y, d.z];
    }
    if !scene.fits_unit_cube(48) {
        return Err(Error::invalid(format!("scene {index} crosses the unit cube boundary")));
    }
    let sampler = ViewSampler {
        image_size: cfg.image_size,
        azimuth: cfg.azimuth_deg,
        elevation: cfg.elevation_deg,
        seed: splitmix64(seed),
        ..ViewSampler::default()
    };
    let grid = VoxelGridSpec::unit(cfg.resolution);
    let views = sampler.sample(cfg.views)?;
    let mut data = SceneData {
        images: Vec::new(),
        depths: Vec::new(),
        masks: Vec::new(),
        cameras: Vec::new(),
        occupancy: voxelize(&scene, &grid),
        grid,
        meta: serde_json::Value::Null,
    };
    let mut angles = Vec::new();
    for (cam, a) in views {
        let r = render_view(&scene, &cam);
        data.images.push(r.image);
        data.depths.push(r.depth);
        data.masks.push(r.mask);
        data.cameras.push(cam);
        angles.push(a);
    }
    data.meta = serde_json::json!({
        "family": family.name(),
        "scene_index": index,
        "dataset_seed": cfg.seed,
        "seed": seed,
        "scene": scene,
        "sampler": sampler,
        "view_angles_deg": angles,
        "grid": {
            "resolution": grid.resolution,
            "center": [grid.center.x, grid.center.y, grid.center.z],
            "side": grid.side,
        },
    });
    Ok((scene, data))
}

/// View whose azimuth lies nearest the middle of the azimuth range the
/// generator sampled from, read from the scene metadata.
pub fn central_view(scene: &SceneData) -> Result<usize> {
    let range: [f64; 2] = serde_json::from_value(scene.meta["sampler"]["azimuth"].clone())
        .map_err(|_| Error::invalid("scene metadata lacks the sampler azimuth range"))?;
    let angles: Vec<[f64; 2]> = serde_json::from_value(scene.meta["view_angles_deg"].clone())
        .map_err(|_| Error::invalid("scene metadata lacks view angles"))?;
    let mid = 0.5 * (range[0] + range[1]);
    angles
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1[0] - mid).abs().total_cmp(&(b.1[0] - mid).abs()))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::invalid("scene has no views"))
}

/// Locations of the scenes written by [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scenes: Vec<PathBuf>,
    pub families: Vec<Family>,
}

/// Write `cfg.scenes` scene folders under `out_dir`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = out_dir.as_ref().to_path_buf();
    cfg.validate()?;
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut manifest = DatasetManifest {
        root: root.clone(),
        scenes: Vec::new(),
        families: Vec::new(),
    };
    for i in 0..cfg.scenes {
        let (scene, data) = generate_scene(cfg, i)?;
        let dir = root.join(format!("scene_{i:04}"));
        write_scene(&dir, &data)?;
        manifest.scenes.push(dir);
        manifest.families.push(scene.family);
    }
    Ok(manifest)
}

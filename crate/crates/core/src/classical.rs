//! Non-learned baselines: silhouette carving and ZNCC plane-sweep stereo.

use rayon::prelude::*;

use crate::diffops::BilinearTaps;
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::geometry::{camera_z_range, Camera, Vec3, VoxelGridSpec};

/// Windows whose intensity variance falls below this are unmatchable.
pub const ZNCC_MIN_VARIANCE: f64 = 1e-12;

/// Zero-mean normalized cross-correlation of two equally sized patches, or
/// `None` when either patch is flat.
pub fn zncc(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "zncc patches differ in size");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    let (va, vb) = (saa / n, sbb / n);
    if va < ZNCC_MIN_VARIANCE || vb < ZNCC_MIN_VARIANCE {
        return None;
    }
    Some((sab / n / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSweepConfig {
    pub window: usize,
    pub n_planes: usize,
    /// Reference-camera depth range; `None` spans the unit cube.
    pub z_range: Option<(f64, f64)>,
    pub min_views_for_score: usize,
}

impl Default for PlaneSweepConfig {
    fn default() -> Self {
        Self {
            window: 5,
            n_planes: 300,
            z_range: None,
            min_views_for_score: 1,
        }
    }
}

impl PlaneSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if self.n_planes < 2 {
            return Err(Error::invalid("plane sweep needs at least 2 planes"));
        }
        if self.min_views_for_score == 0 {
            return Err(Error::invalid("min_views_for_score must be >= 1"));
        }
        if let Some((near, far)) = self.z_range {
            if !(near > 0.0 && far > near) {
                return Err(Error::invalid(format!("bad depth range [{near}, {far}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlaneSweepResult {
    pub height: usize,
    pub width: usize,
    /// Refined depth, 0 where invalid.
    pub depth: Vec<f64>,
    /// Averaged ZNCC of the winning plane, `-inf` where invalid.
    pub score: Vec<f64>,
    pub valid: Vec<bool>,
    pub planes: Vec<f64>,
}

impl PlaneSweepResult {
    pub fn plane_spacing(&self) -> f64 {
        self.planes[1] - self.planes[0]
    }

    pub fn depth_map(&self) -> FeatureMap {
        FeatureMap::new(self.height, self.width, 1, self.depth.clone()).expect("sizes agree")
    }
}

/// Sum over each pixel's `w x w` window, separably; windows reaching past the
/// border are marked with `NaN`.
fn box_sum(x: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
    let r = win / 2;
    let mut rows = vec![f64::NAN; h * w];
    for v in 0..h {
        for u in r..w.saturating_sub(r) {
            rows[v * w + u] = x[v * w + u - r..=v * w + u + r].iter().sum();
        }
    }
    let mut out = vec![f64::NAN; h * w];
    for v in r..h.saturating_sub(r) {
        for u in 0..w {
            let mut s = 0.0;
            for dv in 0..win {
                s += rows[(v + dv - r) * w + u];
            }
            out[v * w + u] = s;
        }
    }
    out
}

/// Fronto-parallel plane sweep from the reference view with winner-take-all
/// depth and a parabola fit around the winning plane.
pub fn plane_sweep_depth(
    reference: &FeatureMap,
    ref_cam: &Camera,
    others: &[(&FeatureMap, &Camera)],
    cfg: &PlaneSweepConfig,
) -> Result<PlaneSweepResult> {
    cfg.validate()?;
    if others.is_empty() {
        return Err(Error::invalid("plane sweep needs at least one other view"));
    }
    let (h, w) = (reference.height, reference.width);
    if ref_cam.intrinsics.height != h || ref_cam.intrinsics.width != w {
        return Err(Error::shape("reference image and camera sizes differ"));
    }
    let gray = |img: &FeatureMap| -> Result<Vec<f64>> {
        match img.channels {
            1 => Ok(img.data.clone()),
            3 => img.to_gray(),
            c => Err(Error::shape(format!("plane sweep needs 1 or 3 channels, got {c}"))),
        }
    };
    let a = gray(reference)?;
    let mut other_gray = Vec::with_capacity(others.len());
    for (img, cam) in others {
        if cam.intrinsics.height != img.height || cam.intrinsics.width != img.width {
            return Err(Error::shape("other image and camera sizes differ"));
        }
        other_gray.push(gray(img)?);
    }

    let (near, far) = cfg
        .z_range
        .unwrap_or_else(|| camera_z_range(&VoxelGridSpec::unit(1), &ref_cam.pose));
    let step = (far - near) / (cfg.n_planes - 1) as f64;
    let planes: Vec<f64> = (0..cfg.n_planes).map(|k| near + k as f64 * step).collect();

    let win = cfg.window;
    let n = (win * win) as f64;
    let sa = box_sum(&a, h, w, win);
    let a2: Vec<f64> = a.iter().map(|x| x * x).collect();
    let saa = box_sum(&a2, h, w, win);

    // Other-camera coordinates of the ref pixel's ray at depth z are z * m + b.
    let k = &ref_cam.intrinsics;
    let rays: Vec<Vec3> = (0..h * w)
        .map(|p| Vec3::new(((p % w) as f64 - k.cx) / k.fx, ((p / w) as f64 - k.cy) / k.fy, 1.0))
        .collect();
    let transfers: Vec<(Vec<Vec3>, Vec3)> = others
        .iter()
        .map(|(_, cam)| {
            let m = cam.pose.rotation * ref_cam.pose.rotation.transpose();
            let b = cam.pose.translation - m * ref_cam.pose.translation;
            (rays.iter().map(|r| m * r).collect(), b)
        })
        .collect();

    // Per plane: averaged score and number of contributing views, per pixel.
    let volume: Vec<(Vec<f64>, Vec<u32>)> = planes
        .par_iter()
        .map(|&z| {
            let mut sum = vec![0.0; h * w];
            let mut count = vec![0u32; h * w];
            let mut warped = vec![0.0; h * w];
            let mut inside = vec![0.0; h * w];
            for (((_, cam), (mrays, b)), og) in others.iter().zip(&transfers).zip(&other_gray) {
                let ko = &cam.intrinsics;
                for p in 0..h * w {
                    let x = z * mrays[p] + b;
                    let (u, v) = (ko.fx * x.x / x.z + ko.cx, ko.fy * x.y / x.z + ko.cy);
                    if x.z > crate::geometry::Z_EPS && ko.in_bounds(u, v) {
                        let t = BilinearTaps::new(ko.height, ko.width, u, v);
                        let mut s = [0.0];
                        t.gather(og, 1, &mut s);
                        warped[p] = s[0];
                        inside[p] = 1.0;
                    } else {
                        warped[p] = 0.0;
                        inside[p] = 0.0;
                    }
                }
                let sb = box_sum(&warped, h, w, win);
                let b2: Vec<f64> = warped.iter().map(|x| x * x).collect();
                let sbb = box_sum(&b2, h, w, win);
                let ab: Vec<f64> = warped.iter().zip(&a).map(|(x, y)| x * y).collect();
                let sab = box_sum(&ab, h, w, win);
                let cnt = box_sum(&inside, h, w, win);
                for p in 0..h * w {
                    // Unfinished border windows are NaN and fail this test too.
                    if cnt[p].is_nan() || cnt[p] < n {
                        continue;
                    }
                    let (ma, mb) = (sa[p] / n, sb[p] / n);
                    let va = saa[p] / n - ma * ma;
                    let vb = sbb[p] / n - mb * mb;
                    if va < ZNCC_MIN_VARIANCE || vb < ZNCC_MIN_VARIANCE {
                        continue;
                    }
                    let s = ((sab[p] / n - ma * mb) / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0);
                    sum[p] += s;
                    count[p] += 1;
                }
            }
            for (s, &c) in sum.iter_mut().zip(&count) {
                if c > 0 {
                    *s /= c as f64;
                }
            }
            (sum, count)
        })
        .collect();

    let min_views = cfg.min_views_for_score as u32;
    let mut depth = vec![0.0; h * w];
    let mut score = vec![f64::NEG_INFINITY; h * w];
    let mut valid = vec![false; h * w];
    for p in 0..h * w {
        let scored = |k: usize| volume[k].1[p] >= min_views;
        let mut best: Option<usize> = None;
        for k in 0..planes.len() {
            if scored(k) && best.is_none_or(|b| volume[k].0[p] > volume[b].0[p]) {
                best = Some(k);
            }
        }
        let Some(kb) = best else { continue };
        let mut z = planes[kb];
        if kb > 0 && kb + 1 < planes.len() && scored(kb - 1) && scored(kb + 1) {
            let (s0, s1, s2) = (volume[kb - 1].0[p], volume[kb].0[p], volume[kb + 1].0[p]);
            let denom = s0 - 2.0 * s1 + s2;
            if denom < 0.0 {
                z += (0.5 * (s0 - s2) / denom).clamp(-0.5, 0.5) * step;
            }
        }
        depth[p] = z;
        score[p] = volume[kb].0[p];
        valid[p] = true;
    }
    Ok(PlaneSweepResult {
        height: h,
        width: w,
        depth,
        score,
        valid,
        planes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HullConfig {
    /// Fraction of views that must see a voxel center inside the silhouette
    /// for [`HullConfig::carve`] to keep it.
    pub required_fraction: f64,
    /// Binarization threshold applied to the fractional hull at evaluation.
    pub threshold: f64,
}

impl Default for HullConfig {
    fn default() -> Self {
        Self {
            required_fraction: 1.0,
            threshold: 0.75,
        }
    }
}

impl HullConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.required_fraction > 0.0 && self.required_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "hull fraction must lie in (0, 1], got {}",
                self.required_fraction
            )));
        }
        Ok(())
    }

    /// Binary carving of a fractional hull by the required fraction.
    pub fn carve(&self, hull: &FeatureGrid) -> Vec<bool> {
        hull.data.iter().map(|&f| f >= self.required_fraction - 1e-12).collect()
    }
}

/// Fraction of views whose silhouette contains each voxel center's projection.
/// Projections behind a camera or outside its raster count as outside.
pub fn visual_hull(masks: &[&[u8]], cameras: &[Camera], spec: &VoxelGridSpec) -> Result<FeatureGrid> {
    if masks.is_empty() {
        return Err(Error::invalid("visual hull needs at least one mask"));
    }
    if masks.len() != cameras.len() {
        return Err(Error::shape(format!("{} masks for {} cameras", masks.len(), cameras.len())));
    }
    for (m, c) in masks.iter().zip(cameras) {
        if m.len() != c.intrinsics.width * c.intrinsics.height {
            return Err(Error::shape("mask size differs from its camera raster"));
        }
    }
    let n = masks.len() as f64;
    let data = (0..spec.num_voxels())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = spec.unravel(idx);
            let x = spec.voxel_center(i, j, k);
            let inside = masks
                .iter()
                .zip(cameras)
                .filter(|(m, cam)| {
                    let p = cam.project(&x);
                    if !p.valid {
                        return false;
                    }
                    let (u, v) = (p.u.round() as usize, p.v.round() as usize);
                    m[v * cam.intrinsics.width + u] != 0
                })
                .count();
            inside as f64 / n
        })
        .collect();
    FeatureGrid::new(*spec, 1, data)
}

/// World points of the pixels with positive depth (and a set mask bit, when given).
pub fn depth_to_pointcloud(depth: &FeatureMap, cam: &Camera, mask: Option<&[u8]>) -> Result<Vec<[f64; 3]>> {
    if depth.channels != 1 || depth.height != cam.intrinsics.height || depth.width != cam.intrinsics.width {
        return Err(Error::shape("depth map must be single-channel and match the camera raster"));
    }
    if let Some(m) = mask {
        if m.len() != depth.num_pixels() {
            return Err(Error::shape("mask size differs from the depth map"));
        }
    }
    let mut pts = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            let d = depth.data[i];
            if d > 0.0 && mask.is_none_or(|m| m[i] != 0) {
                let x = cam.point_at_depth(u as f64, v as f64, d);
                pts.push([x.x, x.y, x.z]);
            }
        }
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Mat3, Pose};

    #[test]
    fn zncc_examples() {
        let a = [0.1, 0.5, 0.3, 0.9, 0.2, 0.4, 0.8, 0.7, 0.6];
        assert!((zncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|x| 3.0 - x).collect();
        assert!((zncc(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(zncc(&a, &[0.5; 9]), None);
        let c: Vec<f64> = a.iter().map(|x| 2.0 * x + 0.1).collect();
        assert!((zncc(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_sum_matches_direct_windows() {
        let (h, w) = (7, 9);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let s = box_sum(&x, h, w, 3);
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                if v == 0 || u == 0 || v == h - 1 || u == w - 1 {
                    assert!(s[p].is_nan());
                } else {
                    let mut d = 0.0;
                    for dv in 0..3 {
                        for du in 0..3 {
                            d += x[(v + dv - 1) * w + u + du - 1];
                        }
                    }
                    assert!((s[p] - d).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            PlaneSweepConfig { window: 4, ..Default::default() },
            PlaneSweepConfig { window: 1, ..Default::default() },
            PlaneSweepConfig { n_planes: 1, ..Default::default() },
            PlaneSweepConfig { min_views_for_score: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(HullConfig { required_fraction: 0.0, threshold: 0.75 }.validate().is_err());
    }

    #[test]
    fn central_pixel_point() {
        let cam = Camera::new(
            Intrinsics::centered(20.0, 21, 21).unwrap(),
            Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap(),
        );
        let mut d = FeatureMap::zeros(21, 21, 1);
        d.set(10, 10, 0, 2.0);
        let pts = depth_to_pointcloud(&d, &cam, None).unwrap();
        assert_eq!(pts.len(), 1);
        assert!(pts[0].iter().all(|x| x.abs() < 1e-12));
        assert!(depth_to_pointcloud(&d, &cam, Some(&[0; 441])).unwrap().is_empty());
    }

    #[test]
    fn single_view_hull_is_the_silhouette_cone() {
        let cam = Camera::new(
            Intrinsics::centered(16.0, 16, 16).unwrap(),
            Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap(),
        );
        let mut mask = vec![0u8; 256];
        for v in 4..12 {
            for u in 6..10 {
                mask[v * 16 + u] = 1;
            }
        }
        let spec = VoxelGridSpec::unit(8);
        let hull = visual_hull(&[&mask], &[cam], &spec).unwrap();
        for idx in 0..spec.num_voxels() {
            let (i, j, k) = spec.unravel(idx);
            let p = cam.project(&spec.voxel_center(i, j, k));
            let (u, v) = (p.u.round() as usize, p.v.round() as usize);
            let expect = p.valid && (6..10).contains(&u) && (4..12).contains(&v);
            assert_eq!(hull.data[idx], if expect { 1.0 } else { 0.0 });
        }
    }
}

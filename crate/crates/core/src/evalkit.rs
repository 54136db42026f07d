//! Reconstruction metrics, aggregation and perturbation harnesses.
//!
//! Scores are grouped by class (the generator family of a scene), averaged
//! within each class, and the dataset figure is the mean of the class means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::classical::visual_hull;
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::geometry::{Camera, Mat3, Pose, Vec3};
use crate::nnkit::ToyModel;
use crate::tensorio::SceneData;

/// Binarization threshold for learned occupancy.
pub const LEARNED_THRESHOLD: f64 = 0.4;
/// Binarization threshold for the visual hull.
pub const HULL_THRESHOLD: f64 = 0.75;

/// Intersection over union of `pred >= threshold` and the occupied ground truth.
/// Two empty sets have IoU 1.
pub fn voxel_iou(pred: &[f64], gt: &[u8], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "iou: {} predictions vs {} ground-truth voxels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p >= threshold, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One labelled score.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Score {
    pub name: String,
    pub class: String,
    pub value: f64,
}

/// Per-class means and the mean over classes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMeans {
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
}

impl ClassMeans {
    pub fn of(scores: &[Score]) -> Self {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for s in scores {
            let e = acc.entry(s.class.clone()).or_default();
            e.0 += s.value;
            e.1 += 1;
        }
        let per_class: BTreeMap<String, f64> =
            acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let mean = if per_class.is_empty() {
            f64::NAN
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        Self { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IoUReport {
    pub threshold: f64,
    pub per_scene: Vec<Score>,
    pub classes: ClassMeans,
}

impl IoUReport {
    pub fn new(threshold: f64, per_scene: Vec<Score>) -> Self {
        let classes = ClassMeans::of(&per_scene);
        Self {
            threshold,
            per_scene,
            classes,
        }
    }

    pub fn mean(&self) -> f64 {
        self.classes.mean
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("voxel IoU at threshold {}\n", self.threshold);
        s += &score_table("scene", &self.per_scene);
        s += &class_table(&self.classes);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("threshold={}\n", self.threshold);
        for sc in &self.per_scene {
            let _ = writeln!(s, "scene.{}={}", sc.name, sc.value);
        }
        s += &class_key_values(&self.classes);
        s
    }
}

/// Median absolute depth error of one view, `None` when it had no valid pixel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewDepthError {
    pub scene: String,
    pub class: String,
    pub view: usize,
    pub median: Option<f64>,
    pub valid_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthErrorReport {
    /// Ground-truth points farther than this from the origin are ignored.
    pub valid_radius: f64,
    pub per_view: Vec<ViewDepthError>,
    pub classes: ClassMeans,
}

/// Radius of the ball enclosing the unit cube around the origin.
pub fn unit_cube_radius() -> f64 {
    3f64.sqrt() / 2.0
}

/// Median of absolute errors over pixels whose ground-truth surface point lies
/// within `radius` of the origin and where both depths are positive.
pub fn view_depth_error(pred: &FeatureMap, gt: &FeatureMap, cam: &Camera, radius: f64) -> Result<(Option<f64>, usize)> {
    if pred.shape() != gt.shape() || pred.channels != 1 {
        return Err(Error::shape(format!(
            "depth maps must be single-channel and equal in size, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let w = gt.width;
    let mut errs: Vec<f64> = gt
        .data
        .iter()
        .zip(&pred.data)
        .enumerate()
        .filter(|&(p, (&g, &d))| {
            g > 0.0
                && d > 0.0
                && d.is_finite()
                && cam.point_at_depth((p % w) as f64, (p / w) as f64, g).norm() <= radius
        })
        .map(|(_, (&g, &d))| (d - g).abs())
        .collect();
    if errs.is_empty() {
        return Ok((None, 0));
    }
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let median = if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    };
    Ok((Some(median), n))
}

/// Input of [`depth_error`]: predicted depth maps for one scene's views.
pub struct DepthPrediction<'a> {
    pub scene: String,
    pub data: &'a SceneData,
    pub depths: &'a [FeatureMap],
}

pub fn depth_error(predictions: &[DepthPrediction<'_>]) -> Result<DepthErrorReport> {
    let radius = unit_cube_radius();
    let mut per_view = Vec::new();
    for pr in predictions {
        if pr.depths.len() != pr.data.num_views() {
            return Err(Error::shape(format!(
                "scene {} has {} views but {} predicted depth maps",
                pr.scene,
                pr.data.num_views(),
                pr.depths.len()
            )));
        }
        let class = pr.data.family();
        for (view, (pred, (gt, cam))) in pr
            .depths
            .iter()
            .zip(pr.data.depths.iter().zip(&pr.data.cameras))
            .enumerate()
        {
            let (median, valid_pixels) = view_depth_error(pred, gt, cam, radius)?;
            if median.is_none() {
                warn!("scene {} view {view}: no valid pixels, excluded", pr.scene);
            }
            per_view.push(ViewDepthError {
                scene: pr.scene.clone(),
                class: class.clone(),
                view,
                median,
                valid_pixels,
            });
        }
    }
    let scores: Vec<Score> = per_view
        .iter()
        .filter_map(|v| {
            v.median.map(|m| Score {
                name: format!("{}/{}", v.scene, v.view),
                class: v.class.clone(),
                value: m,
            })
        })
        .collect();
    Ok(DepthErrorReport {
        valid_radius: radius,
        classes: ClassMeans::of(&scores),
        per_view,
    })
}

impl DepthErrorReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "median absolute depth error, points within {:.4} of the origin\n",
            self.valid_radius
        );
        let _ = writeln!(s, "{:<24} {:>8} {:>12}", "view", "pixels", "median");
        for v in &self.per_view {
            let m = v.median.map_or("excluded".to_string(), |m| format!("{m:.6}"));
            let _ = writeln!(s, "{:<24} {:>8} {:>12}", format!("{}/{}", v.scene, v.view), v.valid_pixels, m);
        }
        s += &class_table(&self.classes);
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("valid_radius={}\n", self.valid_radius);
        for v in &self.per_view {
            let m = v.median.map_or("none".to_string(), |m| m.to_string());
            let _ = writeln!(s, "view.{}.{}={m}", v.scene, v.view);
        }
        s += &class_key_values(&self.classes);
        s
    }
}

fn score_table(label: &str, scores: &[Score]) -> String {
    let mut s = format!("{:<24} {:<12} {:>10}\n", label, "class", "value");
    for sc in scores {
        let _ = writeln!(s, "{:<24} {:<12} {:>10.4}", sc.name, sc.class, sc.value);
    }
    s
}

fn class_table(c: &ClassMeans) -> String {
    let mut s = String::new();
    for (k, v) in &c.per_class {
        let _ = writeln!(s, "{:<24} {:<12} {:>10.4}", "class mean", k, v);
    }
    let _ = writeln!(s, "{:<24} {:<12} {:>10.4}", "mean of classes", "", c.mean);
    s
}

fn class_key_values(c: &ClassMeans) -> String {
    let mut s = String::new();
    for (k, v) in &c.per_class {
        let _ = writeln!(s, "class.{k}={v}");
    }
    let _ = writeln!(s, "mean={}", c.mean);
    s
}

/// Rotate a camera about its own center by an angle drawn uniformly from
/// `[0, theta_max_deg]`, around a random axis perpendicular to its viewing
/// axis. The viewing axis therefore turns by exactly the drawn angle.
pub fn perturb_pose(pose: &Pose, theta_max_deg: f64, seed: u64) -> Result<Pose> {
    if !(theta_max_deg >= 0.0) {
        return Err(Error::invalid(format!("perturbation bound {theta_max_deg} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fraction: f64 = rng.random();
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = fraction * theta_max_deg.to_radians();
    // Axis in camera coordinates, orthogonal to the optical axis.
    let axis = nalgebra::Unit::new_normalize(Vec3::new(phi.cos(), phi.sin(), 0.0));
    let q: Mat3 = *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix();
    let center = pose.center();
    let rotation = q * pose.rotation;
    let rotation = orthonormalize(&rotation);
    Pose::new(rotation, -(rotation * center))
}

fn orthonormalize(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    u * vt
}

/// Angle in degrees between two unit vectors.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Something that turns a subset of a scene's views into an occupancy grid.
pub trait Reconstructor: Sync {
    fn name(&self) -> &str;
    /// Binarization threshold used when scoring this method's output.
    fn threshold(&self) -> f64;
    fn reconstruct(&self, scene: &SceneData, views: &[usize]) -> Result<FeatureGrid>;
}

/// Silhouette carving from the scene's masks and cameras.
pub struct VisualHullMethod {
    pub threshold: f64,
}

impl Default for VisualHullMethod {
    fn default() -> Self {
        Self {
            threshold: HULL_THRESHOLD,
        }
    }
}

impl Reconstructor for VisualHullMethod {
    fn name(&self) -> &str {
        "visual-hull"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn reconstruct(&self, scene: &SceneData, views: &[usize]) -> Result<FeatureGrid> {
        let masks: Vec<&[u8]> = views.iter().map(|&v| scene.masks[v].as_slice()).collect();
        let cams: Vec<Camera> = views.iter().map(|&v| scene.cameras[v]).collect();
        visual_hull(&masks, &cams, &scene.grid)
    }
}

/// Occupancy predicted by a trained voxel model.
pub struct ModelMethod {
    pub model: ToyModel,
    pub threshold: f64,
}

impl ModelMethod {
    pub fn new(model: ToyModel) -> Self {
        Self {
            model,
            threshold: LEARNED_THRESHOLD,
        }
    }
}

impl Reconstructor for ModelMethod {
    fn name(&self) -> &str {
        "model"
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn reconstruct(&self, scene: &SceneData, views: &[usize]) -> Result<FeatureGrid> {
        let images: Vec<&FeatureMap> = views.iter().map(|&v| &scene.images[v]).collect();
        let cams: Vec<Camera> = views.iter().map(|&v| scene.cameras[v]).collect();
        self.model.predict_occupancy(&images, &cams)
    }
}

/// Mean IoU (mean of class means) for each view count.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewSweepTable {
    pub method: String,
    pub threshold: f64,
    pub rows: Vec<(usize, f64)>,
}

impl ViewSweepTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{} IoU at threshold {}\n{:>6} {:>10}\n", self.method, self.threshold, "views", "mean_iou");
        for (n, m) in &self.rows {
            let _ = writeln!(s, "{n:>6} {m:>10.4}");
        }
        s
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("method={}\nthreshold={}\n", self.method, self.threshold);
        for (n, m) in &self.rows {
            let _ = writeln!(s, "views.{n}={m}");
        }
        s
    }
}

/// Reconstruct every scene from its first `n` views for `n = 1..=max_views`.
pub fn view_count_sweep(method: &dyn Reconstructor, scenes: &[(String, SceneData)], max_views: usize) -> Result<ViewSweepTable> {
    if scenes.is_empty() || max_views == 0 {
        return Err(Error::invalid("view sweep needs at least one scene and one view"));
    }
    let available = scenes.iter().map(|(_, s)| s.num_views()).min().unwrap_or(0);
    if available < max_views {
        return Err(Error::invalid(format!(
            "view sweep up to {max_views} views, but a scene has only {available}"
        )));
    }
    let mut rows = Vec::with_capacity(max_views);
    for n in 1..=max_views {
        let views: Vec<usize> = (0..n).collect();
        let scores = scenes
            .par_iter()
            .map(|(name, s)| {
                let grid = method.reconstruct(s, &views)?;
                Ok(Score {
                    name: name.clone(),
                    class: s.family(),
                    value: voxel_iou(&grid.data, &s.occupancy, method.threshold())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((n, ClassMeans::of(&scores).mean));
    }
    Ok(ViewSweepTable {
        method: method.name().to_string(),
        threshold: method.threshold(),
        rows,
    })
}

/// Seed of the perturbation applied to one view; independent of the angle
/// bound, so larger bounds rotate the same cameras further along the same axes.
pub fn perturbation_seed(seed: u64, scene: usize, view: usize) -> u64 {
    seed ^ (scene as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (view as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Visual-hull IoU when carving true silhouettes with perturbed cameras.
pub fn perturbation_sweep(
    method: &VisualHullMethod,
    scenes: &[(String, SceneData)],
    views: usize,
    thetas_deg: &[f64],
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(thetas_deg.len());
    for &theta in thetas_deg {
        let scores = scenes
            .par_iter()
            .enumerate()
            .map(|(si, (name, s))| {
                let n = views.min(s.num_views());
                let masks: Vec<&[u8]> = s.masks[..n].iter().map(|m| m.as_slice()).collect();
                let cams = (0..n)
                    .map(|v| {
                        let pose = perturb_pose(&s.cameras[v].pose, theta, perturbation_seed(seed, si, v))?;
                        Ok(Camera::new(s.cameras[v].intrinsics, pose))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let grid = visual_hull(&masks, &cams, &s.grid)?;
                Ok(Score {
                    name: name.clone(),
                    class: s.family(),
                    value: voxel_iou(&grid.data, &s.occupancy, method.threshold)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((theta, ClassMeans::of(&scores).mean));
    }
    Ok(rows)
}

pub fn perturbation_table_text(rows: &[(f64, f64)]) -> String {
    let mut s = format!("{:>10} {:>10}\n", "theta_deg", "mean_iou");
    for (t, m) in rows {
        let _ = writeln!(s, "{t:>10.2} {m:>10.4}");
    }
    s
}

pub fn perturbation_key_values(rows: &[(f64, f64)]) -> String {
    rows.iter().map(|(t, m)| format!("theta.{t}={m}\n")).collect()
}

/// Write `name.txt` and `name.kv` side by side.
pub fn write_report(dir: &Path, name: &str, text: &str, key_values: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, body) in [("txt", text), ("kv", key_values)] {
        let p = dir.join(format!("{name}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        assert_eq!(voxel_iou(&[1.0, 0.0, 1.0], &[1, 0, 1], 0.4).unwrap(), 1.0);
        // pred {a, b}, gt {b, c}
        let iou = voxel_iou(&[1.0, 1.0, 0.0], &[0, 1, 1], 0.4).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(voxel_iou(&[0.0; 4], &[0; 4], 0.4).unwrap(), 1.0);
        assert!(voxel_iou(&[0.0; 3], &[0; 4], 0.4).is_err());
    }

    #[test]
    fn thresholds_are_honored() {
        let pred = [0.5, 0.8, 0.1];
        let gt = [1, 1, 0];
        assert_eq!(voxel_iou(&pred, &gt, LEARNED_THRESHOLD).unwrap(), 1.0);
        assert_eq!(voxel_iou(&pred, &gt, HULL_THRESHOLD).unwrap(), 0.5);
    }

    #[test]
    fn class_means_average_classes_first() {
        let s = |c: &str, v| Score {
            name: String::new(),
            class: c.into(),
            value: v,
        };
        let m = ClassMeans::of(&[s("a", 1.0), s("a", 0.0), s("a", 0.5), s("b", 0.0)]);
        assert_eq!(m.per_class["a"], 0.5);
        assert_eq!(m.mean, 0.25);
    }

    #[test]
    fn zero_angle_perturbation_is_identity() {
        let pose = Pose::look_at(Vec3::new(0.3, 1.0, -2.0), Vec3::zeros(), Vec3::y()).unwrap();
        let p = perturb_pose(&pose, 0.0, 5).unwrap();
        assert!((p.rotation - pose.rotation).abs().max() < 1e-12);
        assert!((p.translation - pose.translation).abs().max() < 1e-12);
        assert!(perturb_pose(&pose, -1.0, 5).is_err());
    }
}

//! Toy end-to-end reconstruction network.
//!
//! Per view, a small 2D encoder produces a strided feature raster that is
//! unprojected into the voxel grid together with depth and ray-direction
//! channels. The per-view grids are fused (pointwise pooling or a
//! convolutional GRU over the view sequence), refined by a few 3D
//! convolutions, and decoded either into occupancy probabilities or, after
//! projecting the refined grid back into each view, into per-view depth maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::{GeomFeatureConfig, Interp, ProjectPlan, UnprojectPlan};
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureMap};
use crate::fusion::GruCellParams;
use crate::geometry::{Camera, VoxelGridSpec};
use crate::nnkit::conv::Padding;
use crate::nnkit::layers::{ray_reduce_head, voxel_head, RayReduceParams};
use crate::nnkit::param::{ParamId, ParamStore};
use crate::nnkit::tape::{Tape, Var};
use crate::nnkit::tensor::Tensor;

/// Instance-normalization epsilon.
pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Max,
    Mean,
    Gru,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "gru" => Ok(Self::Gru),
            _ => Err(Error::invalid(format!("unknown fusion mode {s:?} (max|mean|gru)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Voxel,
    Depth,
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(Self::Voxel),
            "depth" => Ok(Self::Depth),
            _ => Err(Error::invalid(format!("unknown head {s:?} (voxel|depth)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Output channels of the 3×3 encoder convolutions.
    pub encoder_widths: Vec<usize>,
    /// Stride of each encoder convolution.
    pub encoder_strides: Vec<usize>,
    /// Output channels of the 3×3×3 grid convolutions.
    pub reasoner_widths: Vec<usize>,
    pub fusion: FusionMode,
    pub gru_hidden: usize,
    pub gru_kernel: usize,
    pub head: HeadKind,
    /// Depth planes sampled per ray by the depth head.
    pub n_planes: usize,
    pub image_size: usize,
    pub grid_resolution: usize,
    pub views: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![8, 16, 16],
            encoder_strides: vec![1, 2, 2],
            reasoner_widths: vec![16, 8],
            fusion: FusionMode::Max,
            gru_hidden: 16,
            gru_kernel: 3,
            head: HeadKind::Voxel,
            n_planes: 32,
            image_size: 64,
            grid_resolution: 32,
            views: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[usize]| !v.is_empty() && v.iter().all(|&x| x > 0);
        if !positive(&self.encoder_widths) || !positive(&self.reasoner_widths) {
            return Err(Error::invalid("encoder and reasoner need positive widths"));
        }
        if self.encoder_strides.len() != self.encoder_widths.len() || !positive(&self.encoder_strides) {
            return Err(Error::invalid("one positive stride per encoder layer"));
        }
        if self.encoder_strides[0] != 1 {
            return Err(Error::invalid("the first encoder layer must keep full resolution"));
        }
        if self.image_size == 0 || self.image_size % self.total_stride() != 0 {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of the encoder stride {}",
                self.image_size,
                self.total_stride()
            )));
        }
        if self.grid_resolution == 0 || self.views == 0 || self.n_planes == 0 {
            return Err(Error::invalid("grid resolution, views and planes must be positive"));
        }
        if self.fusion == FusionMode::Gru && (self.gru_hidden == 0 || self.gru_kernel % 2 == 0) {
            return Err(Error::invalid("GRU needs a positive hidden width and an odd kernel"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn grid_spec(&self) -> VoxelGridSpec {
        VoxelGridSpec::unit(self.grid_resolution)
    }

    fn unprojected_channels(&self) -> usize {
        self.encoder_widths.last().unwrap() + GeomFeatureConfig::ALL.extra_channels()
    }

    fn fused_channels(&self) -> usize {
        match self.fusion {
            FusionMode::Gru => self.gru_hidden,
            _ => self.unprojected_channels(),
        }
    }
}

/// Convolution without bias, instance normalization, rectifier.
#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    gain: ParamId,
    shift: ParamId,
    stride: usize,
}

impl ConvBlock {
    fn register(store: &mut ParamStore, prefix: &str, kernel: &[usize], stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in: usize = kernel[..kernel.len() - 1].iter().product();
        let cout = *kernel.last().unwrap();
        Self {
            w: store.add_he(format!("{prefix}.w"), kernel, fan_in, rng),
            gain: store.add_filled(format!("{prefix}.gain"), &[cout], 1.0),
            shift: store.add_filled(format!("{prefix}.shift"), &[cout], 0.0),
            stride,
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.conv(x, w, None, self.stride, Padding::Same)?;
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        let y = tape.instance_norm(y, g, s, IN_EPS)?;
        Ok(tape.relu(y))
    }
}

#[derive(Clone, Debug)]
struct DepthHead {
    ray: RayReduceParams,
    refine_w: ParamId,
    refine_b: ParamId,
}

/// Outputs of one forward pass.
pub struct Forward {
    /// `[V, V, V, 1]` occupancy probabilities (voxel head).
    pub occupancy: Option<Var>,
    /// `[H, W, 1]` depth per input view (depth head).
    pub depths: Vec<Var>,
}

pub struct ToyModel {
    pub config: ToyModelConfig,
    pub store: ParamStore,
    encoder: Vec<ConvBlock>,
    gru: Option<GruCellParams<ParamId>>,
    reasoner: Vec<ConvBlock>,
    voxel: Option<(ParamId, ParamId)>,
    depth: Option<DepthHead>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut encoder = Vec::new();
        for (i, (&w, &s)) in config.encoder_widths.iter().zip(&config.encoder_strides).enumerate() {
            encoder.push(ConvBlock::register(&mut store, &format!("enc{i}"), &[3, 3, cin, w], s, &mut rng));
            cin = w;
        }
        let gru = (config.fusion == FusionMode::Gru).then(|| {
            GruCellParams::register(
                &mut store,
                "gru",
                config.unprojected_channels(),
                config.gru_hidden,
                config.gru_kernel,
                &mut rng,
            )
        });
        let mut cin = config.fused_channels();
        let mut reasoner = Vec::new();
        for (i, &w) in config.reasoner_widths.iter().enumerate() {
            reasoner.push(ConvBlock::register(&mut store, &format!("grid{i}"), &[3, 3, 3, cin, w], 1, &mut rng));
            cin = w;
        }
        let (voxel, depth) = match config.head {
            HeadKind::Voxel => {
                let w = store.add_he("voxel.w", &[1, 1, 1, cin, 2], cin, &mut rng);
                let b = store.add_filled("voxel.b", &[2], 0.0);
                (Some((w, b)), None)
            }
            HeadKind::Depth => {
                let ray = RayReduceParams::register(&mut store, "ray", config.n_planes * cin, &mut rng);
                let skip = config.encoder_widths[0] + 1;
                let refine_w = store.add_he("refine.w", &[3, 3, skip, 1], 9 * skip, &mut rng);
                let refine_b = store.add_filled("refine.b", &[1], 0.0);
                (
                    None,
                    Some(DepthHead {
                        ray,
                        refine_w,
                        refine_b,
                    }),
                )
            }
        };
        Ok(Self {
            config,
            store,
            encoder,
            gru,
            reasoner,
            voxel,
            depth,
        })
    }

    /// Record the network on `tape` for the given images and cameras, in order.
    pub fn forward(&self, tape: &mut Tape, images: &[&FeatureMap], cameras: &[Camera]) -> Result<Forward> {
        let cfg = &self.config;
        if images.is_empty() || images.len() != cameras.len() {
            return Err(Error::invalid(format!(
                "forward needs matching non-empty images and cameras, got {} and {}",
                images.len(),
                cameras.len()
            )));
        }
        let spec = cfg.grid_spec();
        let stride = cfg.total_stride();
        let mut skips = Vec::with_capacity(images.len());
        let mut grids = Vec::with_capacity(images.len());
        for (img, cam) in images.iter().zip(cameras) {
            if img.height != cfg.image_size || img.width != cfg.image_size || img.channels != 3 {
                return Err(Error::shape(format!(
                    "model expects {0}x{0}x3 images, got {1}x{2}x{3}",
                    cfg.image_size, img.height, img.width, img.channels
                )));
            }
            if cam.intrinsics.width != img.width || cam.intrinsics.height != img.height {
                return Err(Error::shape("camera raster differs from image size"));
            }
            let mut x = tape.constant(Tensor::from((*img).clone()));
            for (i, block) in self.encoder.iter().enumerate() {
                x = block.apply(tape, &self.store, x)?;
                if i == 0 {
                    skips.push(x);
                }
            }
            let plan = UnprojectPlan::new(&cam.downsampled(stride), &spec);
            grids.push(tape.unproject(x, plan, GeomFeatureConfig::ALL)?);
        }

        let mut g = match (cfg.fusion, &self.gru) {
            (FusionMode::Max, _) => tape.max_of(&grids)?,
            (FusionMode::Mean, _) => tape.mean_of(&grids)?,
            (FusionMode::Gru, Some(p)) => {
                let p = p.on_tape(tape, &self.store);
                let n = spec.resolution;
                let mut h = tape.constant(Tensor::zeros(&[n, n, n, cfg.gru_hidden]));
                for &x in &grids {
                    h = crate::fusion::gru_step_on(tape, h, x, &p)?;
                }
                h
            }
            (FusionMode::Gru, None) => unreachable!("GRU parameters exist in GRU mode"),
        };
        for block in &self.reasoner {
            g = block.apply(tape, &self.store, g)?;
        }

        let mut out = Forward {
            occupancy: None,
            depths: Vec::new(),
        };
        if let Some((w, b)) = self.voxel {
            let w = tape.param(&self.store, w);
            let b = tape.param(&self.store, b);
            out.occupancy = Some(voxel_head(tape, g, w, b)?);
        }
        if let Some(head) = &self.depth {
            let layers = head.ray.on_tape(tape, &self.store);
            let rw = tape.param(&self.store, head.refine_w);
            let rb = tape.param(&self.store, head.refine_b);
            for (cam, &skip) in cameras.iter().zip(&skips) {
                let plan = ProjectPlan::new(&cam.downsampled(stride), &spec, cfg.n_planes, Interp::Nearest)?;
                let rays = tape.project(g, plan)?;
                let coarse = ray_reduce_head(tape, rays, &layers)?;
                let coarse = tape.upsample_nearest(coarse, stride)?;
                let cat = tape.concat_channels(&[coarse, skip])?;
                let residual = tape.conv(cat, rw, Some(rb), 1, Padding::Same)?;
                out.depths.push(tape.add(coarse, residual)?);
            }
        }
        Ok(out)
    }

    /// Training loss for one set of views of a scene: cross-entropy against
    /// the occupancy grid, or mean over views of the L1 depth error on pixels
    /// with ground-truth depth.
    pub fn loss(&self, tape: &mut Tape, scene: &crate::tensorio::SceneData, views: &[usize]) -> Result<Var> {
        let images: Vec<&FeatureMap> = views.iter().map(|&v| &scene.images[v]).collect();
        let cams: Vec<Camera> = views.iter().map(|&v| scene.cameras[v]).collect();
        let out = self.forward(tape, &images, &cams)?;
        match self.config.head {
            HeadKind::Voxel => {
                if scene.grid.resolution != self.config.grid_resolution {
                    return Err(Error::shape(format!(
                        "scene grid is {}^3, model grid is {}^3",
                        scene.grid.resolution, self.config.grid_resolution
                    )));
                }
                let p = out.occupancy.expect("voxel head output");
                tape.bce_loss(p, &scene.occupancy_f64())
            }
            HeadKind::Depth => {
                let mut losses = Vec::with_capacity(views.len());
                for (&v, &d) in views.iter().zip(&out.depths) {
                    let gt = &scene.depths[v].data;
                    let mask: Vec<bool> = gt.iter().map(|&z| z > 0.0).collect();
                    losses.push(tape.l1_loss(d, gt, &mask)?);
                }
                tape.mean_of(&losses)
            }
        }
    }

    pub fn predict_occupancy(&self, images: &[&FeatureMap], cameras: &[Camera]) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, cameras)?;
        let p = out
            .occupancy
            .ok_or_else(|| Error::invalid("model has no voxel head"))?;
        tape.value(p).to_feature_grid(self.config.grid_spec())
    }

    pub fn predict_depths(&self, images: &[&FeatureMap], cameras: &[Camera]) -> Result<Vec<FeatureMap>> {
        if self.depth.is_none() {
            return Err(Error::invalid("model has no depth head"));
        }
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, cameras)?;
        out.depths.iter().map(|&d| tape.value(d).to_feature_map()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose, Vec3};

    fn tiny(head: HeadKind, fusion: FusionMode) -> ToyModelConfig {
        ToyModelConfig {
            encoder_widths: vec![2, 3],
            encoder_strides: vec![1, 2],
            reasoner_widths: vec![3, 2],
            fusion,
            gru_hidden: 2,
            head,
            n_planes: 4,
            image_size: 8,
            grid_resolution: 4,
            views: 2,
            ..Default::default()
        }
    }

    fn inputs() -> (Vec<FeatureMap>, Vec<Camera>) {
        let k = Intrinsics::centered(8.0, 8, 8).unwrap();
        let cams = [Vec3::new(0.0, 0.0, -2.0), Vec3::new(1.5, 0.5, -1.2)]
            .map(|e| Camera::new(k, Pose::look_at(e, Vec3::zeros(), Vec3::y()).unwrap()));
        let imgs = (0..2)
            .map(|s| {
                let d = (0..8 * 8 * 3).map(|i| (((i + s * 5) * 31 % 17) as f64) / 17.0).collect();
                FeatureMap::new(8, 8, 3, d).unwrap()
            })
            .collect();
        (imgs, cams.to_vec())
    }

    #[test]
    fn config_validation() {
        assert!(ToyModelConfig::default().validate().is_ok());
        let bad = ToyModelConfig {
            image_size: 66,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ToyModelConfig {
            views: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("gru".parse::<FusionMode>().unwrap(), FusionMode::Gru);
        assert!("sum".parse::<FusionMode>().is_err());
    }

    #[test]
    fn output_shapes() {
        let (imgs, cams) = inputs();
        let refs: Vec<&FeatureMap> = imgs.iter().collect();
        for fusion in [FusionMode::Max, FusionMode::Mean, FusionMode::Gru] {
            let m = ToyModel::new(tiny(HeadKind::Voxel, fusion)).unwrap();
            let g = m.predict_occupancy(&refs, &cams).unwrap();
            assert_eq!(g.data.len(), 64);
            assert!(g.data.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let m = ToyModel::new(tiny(HeadKind::Depth, FusionMode::Max)).unwrap();
        let d = m.predict_depths(&refs, &cams).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].shape(), [8, 8, 1]);
    }
}

//! Command-line front end: data generation, baselines, training, gradient
//! checks and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use voxstereo::classical::{depth_to_pointcloud, plane_sweep_depth, PlaneSweepConfig};
use voxstereo::evalkit::{
    self, depth_error, perturbation_key_values, perturbation_sweep, perturbation_table_text, view_count_sweep,
    voxel_iou, write_report, DepthPrediction, IoUReport, ModelMethod, Reconstructor, Score, VisualHullMethod,
};
use voxstereo::gradcheck::{self, GradcheckConfig, OpGroup};
use voxstereo::nnkit::train::{format_loss_curve, LOSS_CURVE};
use voxstereo::nnkit::{load_checkpoint, save_checkpoint, train_toy, FusionMode, HeadKind, ToyModel, ToyModelConfig};
use voxstereo::synthgen::{central_view, generate_dataset, DatasetConfig, Family};
use voxstereo::tensorio::{export_ply, list_scenes, read_scene, write_tensor, SceneData, TensorFile, TensorValues};
use voxstereo::{FeatureMap, VoxelGridSpec};

const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "voxstereo", version, about = "Multi-view voxel and depth reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-view dataset.
    GenData(GenDataArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Carve silhouettes into occupancy grids.
    VisualHull(VisualHullArgs),
    /// Classical plane-sweep stereo depth for one reference view per scene.
    PlaneSweep(PlaneSweepArgs),
    /// Train the toy reconstruction network.
    TrainToy(TrainToyArgs),
    /// IoU or depth-error report for a method.
    Eval(EvalArgs),
    /// Mean IoU as a function of the number of views.
    SweepViews(SweepViewsArgs),
    /// Visual-hull IoU under camera rotation noise.
    PerturbEval(PerturbEvalArgs),
    /// Unproject depth maps into PLY point clouds.
    ExportPly(ExportPlyArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    views: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxel grid resolution.
    #[arg(long, default_value_t = 32)]
    res: usize,
    /// Image size as HxW; only square images are supported.
    #[arg(long, default_value = "64x64", value_parser = parse_image_size)]
    img: usize,
    #[arg(long)]
    textureless: bool,
    /// Comma-separated families cycled over scenes.
    #[arg(long, value_delimiter = ',', default_value = "sphere,box,composite")]
    families: Vec<String>,
    /// Azimuth range in degrees, as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 360.0])]
    azimuth: Vec<f64>,
    /// Elevation range in degrees, as `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [-20.0, 30.0])]
    elevation: Vec<f64>,
    /// Random tilt of the light direction per scene, degrees.
    #[arg(long, default_value_t = 0.0)]
    light_jitter: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OpArg {
    All,
    Bilinear,
    Unproject,
    Project,
    Gru,
    Layers,
}

impl From<OpArg> for OpGroup {
    fn from(o: OpArg) -> Self {
        match o {
            OpArg::All => OpGroup::All,
            OpArg::Bilinear => OpGroup::Bilinear,
            OpArg::Unproject => OpGroup::Unproject,
            OpArg::Project => OpGroup::Project,
            OpArg::Gru => OpGroup::Gru,
            OpArg::Layers => OpGroup::Layers,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    op: OpArg,
    #[arg(long, default_value_t = 2)]
    trials: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional directory for the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct VisualHullArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the first N views of each scene; all by default.
    #[arg(long)]
    views: Option<usize>,
    /// Binarization threshold for the IoU report.
    #[arg(long, default_value_t = evalkit::HULL_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct PlaneSweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    planes: usize,
    /// Side of the square ZNCC window.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Reference view index, or `center` for the view nearest the middle of
    /// the sampled azimuth range.
    #[arg(long, default_value = "0")]
    reference: String,
    /// Use the first N views of each scene; all by default.
    #[arg(long)]
    views: Option<usize>,
    /// Scoring views a plane needs before it can win.
    #[arg(long, default_value_t = 1)]
    min_views: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainToyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value = "max")]
    fusion: String,
    #[arg(long, default_value = "voxel")]
    head: String,
    /// Views per training step.
    #[arg(long, default_value_t = 4)]
    views: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on the first N scenes only; all by default.
    #[arg(long)]
    train_scenes: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    VisualHull,
    Model,
    PlaneSweep,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Checkpoint directory for `--method model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the first N views of each scene; the model's training count or all by default.
    #[arg(long)]
    views: Option<usize>,
    /// Override the method's binarization threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 300)]
    planes: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
}

#[derive(Args, Debug, Serialize)]
struct SweepViewsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "visual-hull")]
    method: MethodArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_views: usize,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct PerturbEvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Rotation bounds in degrees.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 2.5, 5.0, 10.0])]
    thetas: Vec<f64>,
    #[arg(long, default_value_t = evalkit::HULL_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DepthSource {
    /// Rendered ground-truth depth.
    Gt,
    /// Depth predicted by a checkpoint with a depth head.
    Model,
}

#[derive(Args, Debug, Serialize)]
struct ExportPlyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    source: DepthSource,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the first N views of each scene.
    #[arg(long)]
    views: Option<usize>,
    /// Keep every predicted pixel instead of only the silhouette.
    #[arg(long)]
    no_mask: bool,
}

fn parse_image_size(s: &str) -> std::result::Result<usize, String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h != w {
        return Err(format!("only square images are supported, got {h}x{w}"));
    }
    Ok(h)
}

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    options: &'a T,
}

fn write_run_config<T: Serialize>(dir: &Path, command: &str, options: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        options,
    };
    let path = dir.join(RUN_CONFIG);
    fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_scenes(root: &Path) -> Result<Vec<(String, SceneData)>> {
    let dirs = list_scenes(root)?;
    dirs.iter()
        .map(|d| {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("scene").to_string();
            let s = read_scene(d).with_context(|| format!("reading {}", d.display()))?;
            Ok((name, s))
        })
        .collect()
}

fn first_views(scene: &SceneData, limit: Option<usize>) -> Result<Vec<usize>> {
    let n = limit.unwrap_or(scene.num_views());
    if n == 0 || n > scene.num_views() {
        bail!("asked for {n} views, scene has {}", scene.num_views());
    }
    Ok((0..n).collect())
}

fn grid_tensor(data: &[f64], spec: &VoxelGridSpec) -> Result<TensorFile> {
    let v = spec.resolution;
    Ok(TensorFile::f32_from_f64(vec![v, v, v], data)?)
}

fn load_model(checkpoint: Option<&Path>) -> Result<ToyModel> {
    let dir = checkpoint.ok_or_else(|| anyhow!("--checkpoint is required for the model method"))?;
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let families = a
        .families
        .iter()
        .map(|f| f.parse::<Family>())
        .collect::<voxstereo::Result<Vec<_>>>()?;
    let cfg = DatasetConfig {
        scenes: a.scenes,
        views: a.views,
        resolution: a.res,
        image_size: a.img,
        textureless: a.textureless,
        light_jitter_deg: a.light_jitter,
        families,
        azimuth_deg: [a.azimuth[0], a.azimuth[1]],
        elevation_deg: [a.elevation[0], a.elevation[1]],
        seed: a.seed,
    };
    cfg.validate()?;
    let manifest = generate_dataset(&cfg, &a.out)?;
    write_run_config(&a.out, "gen-data", a)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradcheckConfig {
        trials: a.trials,
        step: a.step,
        seed: a.seed,
    };
    let reports = gradcheck::run(a.op.into(), cfg)?;
    let mut text = format!("{:<28} {:>8} {:>14} {:>6}\n", "op", "entries", "max_rel_error", "pass");
    let mut failed = 0;
    for r in &reports {
        let pass = r.max_rel_error <= a.tol;
        failed += usize::from(!pass);
        text += &format!("{:<28} {:>8} {:>14.3e} {:>6}\n", r.op, r.entries, r.max_rel_error, if pass { "ok" } else { "FAIL" });
    }
    print!("{text}");
    if let Some(out) = &a.out {
        let kv: String = reports.iter().map(|r| format!("{}={}\n", r.op, r.max_rel_error)).collect();
        write_report(out, "gradcheck", &text, &kv)?;
        write_run_config(out, "gradcheck", a)?;
    }
    if failed > 0 {
        bail!("{failed} of {} checks exceed tolerance {}", reports.len(), a.tol);
    }
    Ok(())
}

fn run_visual_hull(a: &VisualHullArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let mut scores = Vec::with_capacity(scenes.len());
    for (name, s) in &scenes {
        let views = first_views(s, a.views)?;
        let hull = VisualHullMethod { threshold: a.threshold }.reconstruct(s, &views)?;
        let dir = a.out.join(name);
        fs::create_dir_all(&dir)?;
        write_tensor(dir.join("hull.lsmt"), &grid_tensor(&hull.data, &s.grid)?)?;
        scores.push(Score {
            name: name.clone(),
            class: s.family(),
            value: voxel_iou(&hull.data, &s.occupancy, a.threshold)?,
        });
    }
    let report = IoUReport::new(a.threshold, scores);
    write_report(&a.out, "iou", &report.to_text(), &report.to_key_values())?;
    write_run_config(&a.out, "visual-hull", a)?;
    print!("{}", report.to_text());
    Ok(())
}

fn resolve_reference(spec: &str, scene: &SceneData) -> Result<usize> {
    let r = if spec == "center" {
        central_view(scene)?
    } else {
        spec.parse()
            .map_err(|_| anyhow!("--reference must be a view index or `center`, got {spec:?}"))?
    };
    if r >= scene.num_views() {
        bail!("reference view {r} out of range ({} views)", scene.num_views());
    }
    Ok(r)
}

struct SweepOutcome {
    reference: usize,
    depth: FeatureMap,
    valid: Vec<bool>,
    spacing: f64,
}

fn sweep_scene(s: &SceneData, reference: usize, views: &[usize], cfg: &PlaneSweepConfig) -> Result<SweepOutcome> {
    let others: Vec<(&FeatureMap, &voxstereo::Camera)> = views
        .iter()
        .filter(|&&v| v != reference)
        .map(|&v| (&s.images[v], &s.cameras[v]))
        .collect();
    let r = plane_sweep_depth(&s.images[reference], &s.cameras[reference], &others, cfg)?;
    Ok(SweepOutcome {
        reference,
        depth: r.depth_map(),
        spacing: r.plane_spacing(),
        valid: r.valid,
    })
}

fn run_plane_sweep(a: &PlaneSweepArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let cfg = PlaneSweepConfig {
        window: a.window,
        n_planes: a.planes,
        min_views_for_score: a.min_views,
        ..Default::default()
    };
    let mut text = format!(
        "{:<12} {:>5} {:>10} {:>12} {:>12}\n",
        "scene", "ref", "fg_valid", "within_2dz", "median_err"
    );
    let mut kv = String::new();
    let mut depths = Vec::with_capacity(scenes.len());
    for (name, s) in &scenes {
        let views = first_views(s, a.views)?;
        let reference = resolve_reference(&a.reference, s)?;
        if !views.contains(&reference) {
            bail!("reference view {reference} is not among the first {} views", views.len());
        }
        info!("{name}: sweeping from view {reference}");
        let out = sweep_scene(s, reference, &views, &cfg)?;
        let dir = a.out.join(name);
        fs::create_dir_all(&dir)?;
        let (h, w) = (out.depth.height, out.depth.width);
        write_tensor(dir.join("depth.lsmt"), &TensorFile::f32_from_f64(vec![h, w], &out.depth.data)?)?;
        let valid_u8: Vec<u8> = out.valid.iter().map(|&v| u8::from(v)).collect();
        write_tensor(dir.join("valid.lsmt"), &TensorFile::new(vec![h, w], TensorValues::U8(valid_u8))?)?;
        let cloud = depth_to_pointcloud(&out.depth, &s.cameras[reference], None)?;
        export_ply(dir.join("cloud.ply"), &cloud, None)?;

        let gt = &s.depths[reference].data;
        let fg: Vec<usize> = (0..gt.len()).filter(|&p| gt[p] > 0.0).collect();
        let mut errs: Vec<f64> = fg
            .iter()
            .filter(|&&p| out.valid[p])
            .map(|&p| (out.depth.data[p] - gt[p]).abs())
            .collect();
        errs.sort_by(f64::total_cmp);
        let fg_valid = errs.len() as f64 / fg.len().max(1) as f64;
        let within = errs.iter().filter(|&&e| e <= 2.0 * out.spacing).count() as f64 / errs.len().max(1) as f64;
        let median = errs.get(errs.len() / 2).copied().unwrap_or(f64::NAN);
        text += &format!("{name:<12} {:>5} {fg_valid:>10.4} {within:>12.4} {median:>12.5}\n", out.reference);
        kv += &format!(
            "{name}.reference={}\n{name}.fg_valid={fg_valid}\n{name}.within_2dz={within}\n{name}.median_err={median}\n",
            out.reference
        );
        depths.push((reference, out.depth));
    }
    write_report(&a.out, "plane_sweep", &text, &kv)?;
    let preds: Vec<Vec<FeatureMap>> = depths.iter().map(|(_, d)| vec![d.clone()]).collect();
    let refs: Vec<SceneData> = scenes
        .iter()
        .zip(&depths)
        .map(|((_, s), (r, _))| subset_views(s, &[*r]))
        .collect();
    let items: Vec<DepthPrediction> = scenes
        .iter()
        .zip(&refs)
        .zip(&preds)
        .map(|(((name, _), data), d)| DepthPrediction {
            scene: name.clone(),
            data,
            depths: d,
        })
        .collect();
    let report = depth_error(&items)?;
    write_report(&a.out, "depth_error", &report.to_text(), &report.to_key_values())?;
    write_run_config(&a.out, "plane-sweep", a)?;
    print!("{text}");
    Ok(())
}

/// The scene seen through a subset of its views.
fn subset_views(s: &SceneData, views: &[usize]) -> SceneData {
    SceneData {
        images: views.iter().map(|&v| s.images[v].clone()).collect(),
        depths: views.iter().map(|&v| s.depths[v].clone()).collect(),
        masks: views.iter().map(|&v| s.masks[v].clone()).collect(),
        cameras: views.iter().map(|&v| s.cameras[v]).collect(),
        occupancy: s.occupancy.clone(),
        grid: s.grid,
        meta: s.meta.clone(),
    }
}

fn run_train_toy(a: &TrainToyArgs) -> Result<()> {
    let mut scenes: Vec<SceneData> = load_scenes(&a.data)?.into_iter().map(|(_, s)| s).collect();
    if let Some(n) = a.train_scenes {
        if n == 0 || n > scenes.len() {
            bail!("--train-scenes {n} with {} scenes available", scenes.len());
        }
        scenes.truncate(n);
    }
    let first = &scenes[0];
    let cfg = ToyModelConfig {
        fusion: a.fusion.parse::<FusionMode>()?,
        head: a.head.parse::<HeadKind>()?,
        image_size: first.images[0].height,
        grid_resolution: first.grid.resolution,
        views: a.views,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let mut model = ToyModel::new(cfg)?;
    if a.iters > 0 {
        let report = train_toy(&mut model, &scenes, a.iters)?;
        fs::create_dir_all(&a.out)?;
        fs::write(a.out.join(LOSS_CURVE), format_loss_curve(&report.losses))?;
        println!(
            "loss {:.6} -> {:.6} over {} iterations",
            report.initial_loss(),
            report.final_loss(),
            a.iters
        );
    }
    save_checkpoint(&a.out.join("checkpoint"), &model.config, &model.store)?;
    write_run_config(&a.out, "train-toy", a)?;
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    match a.method {
        MethodArg::VisualHull => {
            let m = VisualHullMethod {
                threshold: a.threshold.unwrap_or(evalkit::HULL_THRESHOLD),
            };
            iou_eval(&m, &scenes, a.views, &a.out)?;
        }
        MethodArg::Model => {
            let model = load_model(a.checkpoint.as_deref())?;
            let views = Some(a.views.unwrap_or(model.config.views));
            match model.config.head {
                HeadKind::Voxel => {
                    let mut m = ModelMethod::new(model);
                    if let Some(t) = a.threshold {
                        m.threshold = t;
                    }
                    iou_eval(&m, &scenes, views, &a.out)?;
                }
                HeadKind::Depth => {
                    let mut refs = Vec::with_capacity(scenes.len());
                    let mut preds = Vec::with_capacity(scenes.len());
                    for (_, s) in &scenes {
                        let v = first_views(s, views)?;
                        let images: Vec<&FeatureMap> = v.iter().map(|&i| &s.images[i]).collect();
                        preds.push(model.predict_depths(&images, &s.cameras[..v.len()])?);
                        refs.push(subset_views(s, &v));
                    }
                    let items: Vec<DepthPrediction> = scenes
                        .iter()
                        .zip(&refs)
                        .zip(&preds)
                        .map(|(((name, _), data), depths)| DepthPrediction {
                            scene: name.clone(),
                            data,
                            depths,
                        })
                        .collect();
                    let report = depth_error(&items)?;
                    write_report(&a.out, "depth_error", &report.to_text(), &report.to_key_values())?;
                    print!("{}", report.to_text());
                }
            }
        }
        MethodArg::PlaneSweep => {
            let cfg = PlaneSweepConfig {
                window: a.window,
                n_planes: a.planes,
                ..Default::default()
            };
            let mut refs = Vec::with_capacity(scenes.len());
            let mut preds = Vec::with_capacity(scenes.len());
            for (_, s) in &scenes {
                let views = first_views(s, a.views)?;
                let out = sweep_scene(s, 0, &views, &cfg)?;
                refs.push(subset_views(s, &[0]));
                preds.push(vec![out.depth]);
            }
            let items: Vec<DepthPrediction> = scenes
                .iter()
                .zip(&refs)
                .zip(&preds)
                .map(|(((name, _), data), depths)| DepthPrediction {
                    scene: name.clone(),
                    data,
                    depths,
                })
                .collect();
            let report = depth_error(&items)?;
            write_report(&a.out, "depth_error", &report.to_text(), &report.to_key_values())?;
            print!("{}", report.to_text());
        }
    }
    write_run_config(&a.out, "eval", a)?;
    Ok(())
}

fn iou_eval(method: &dyn Reconstructor, scenes: &[(String, SceneData)], views: Option<usize>, out: &Path) -> Result<()> {
    let mut scores = Vec::with_capacity(scenes.len());
    for (name, s) in scenes {
        let v = first_views(s, views)?;
        let grid = method.reconstruct(s, &v)?;
        scores.push(Score {
            name: name.clone(),
            class: s.family(),
            value: voxel_iou(&grid.data, &s.occupancy, method.threshold())?,
        });
    }
    let report = IoUReport::new(method.threshold(), scores);
    write_report(out, "iou", &report.to_text(), &report.to_key_values())?;
    print!("{}", report.to_text());
    Ok(())
}

fn run_sweep_views(a: &SweepViewsArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let table = match a.method {
        MethodArg::VisualHull => {
            let m = VisualHullMethod {
                threshold: a.threshold.unwrap_or(evalkit::HULL_THRESHOLD),
            };
            view_count_sweep(&m, &scenes, a.max_views)?
        }
        MethodArg::Model => {
            let mut m = ModelMethod::new(load_model(a.checkpoint.as_deref())?);
            if m.model.config.head != HeadKind::Voxel {
                bail!("view sweeps need a checkpoint with a voxel head");
            }
            if let Some(t) = a.threshold {
                m.threshold = t;
            }
            view_count_sweep(&m, &scenes, a.max_views)?
        }
        MethodArg::PlaneSweep => bail!("plane sweep produces depth maps, not occupancy grids"),
    };
    write_report(&a.out, "view_sweep", &table.to_text(), &table.to_key_values())?;
    write_run_config(&a.out, "sweep-views", a)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run_perturb_eval(a: &PerturbEvalArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    if a.thetas.iter().any(|&t| !(t >= 0.0)) {
        bail!("rotation bounds must be non-negative");
    }
    let m = VisualHullMethod { threshold: a.threshold };
    let rows = perturbation_sweep(&m, &scenes, a.views, &a.thetas, a.seed)?;
    let text = perturbation_table_text(&rows);
    write_report(&a.out, "perturbation", &text, &perturbation_key_values(&rows))?;
    write_run_config(&a.out, "perturb-eval", a)?;
    print!("{text}");
    Ok(())
}

fn run_export_ply(a: &ExportPlyArgs) -> Result<()> {
    let scenes = load_scenes(&a.data)?;
    let model = match a.source {
        DepthSource::Model => {
            let m = load_model(a.checkpoint.as_deref())?;
            if m.config.head != HeadKind::Depth {
                bail!("--source model needs a checkpoint with a depth head");
            }
            Some(m)
        }
        DepthSource::Gt => None,
    };
    for (name, s) in &scenes {
        let views = first_views(s, a.views.or(model.as_ref().map(|m| m.config.views)))?;
        let depths: Vec<FeatureMap> = match &model {
            Some(m) => {
                let images: Vec<&FeatureMap> = views.iter().map(|&v| &s.images[v]).collect();
                m.predict_depths(&images, &s.cameras[..views.len()])?
            }
            None => views.iter().map(|&v| s.depths[v].clone()).collect(),
        };
        let mut cloud = Vec::new();
        for (&v, d) in views.iter().zip(&depths) {
            let mask = (!a.no_mask).then_some(s.masks[v].as_slice());
            cloud.extend(depth_to_pointcloud(d, &s.cameras[v], mask)?);
        }
        fs::create_dir_all(&a.out)?;
        export_ply(a.out.join(format!("{name}.ply")), &cloud, None)?;
        println!("{name}: {} points", cloud.len());
    }
    write_run_config(&a.out, "export-ply", a)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::VisualHull(a) => run_visual_hull(a),
        Command::PlaneSweep(a) => run_plane_sweep(a),
        Command::TrainToy(a) => run_train_toy(a),
        Command::Eval(a) => run_eval(a),
        Command::SweepViews(a) => run_sweep_views(a),
        Command::PerturbEval(a) => run_perturb_eval(a),
        Command::ExportPly(a) => run_export_ply(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

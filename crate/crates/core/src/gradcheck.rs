//! Finite-difference verification of every backward rule.
//!
//! Each check builds a small random instance, reduces the operator output to
//! a scalar with a random cotangent, and compares the reverse-mode gradient
//! of every input entry with a central difference. The error of one entry is
//! `|a - n| / max(|a|, |n|, 1e-3 * max_j |n_j|)`; an operator's figure is the
//! largest entry error over all its inputs and trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffops::{bilinear_sample, bilinear_sample_vjp, GeomFeatureConfig, Interp, ProjectPlan, UnprojectPlan};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::fusion::{gru_shapes, gru_step_on, GruCellParams, LN_EPS};
use crate::geometry::{Camera, Intrinsics, Pose, Vec3, VoxelGridSpec};
use crate::nnkit::layers::{channel_plan, ray_reduce_head, voxel_head};
use crate::nnkit::{Padding, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Groups selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpGroup {
    All,
    Bilinear,
    Unproject,
    Project,
    Gru,
    Layers,
}

impl std::str::FromStr for OpGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "bilinear" => Self::Bilinear,
            "unproject" => Self::Unproject,
            "project" => Self::Project,
            "gru" => Self::Gru,
            "layers" => Self::Layers,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown op {s:?} (all|bilinear|unproject|project|gru|layers)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 2,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Largest relative entry error between analytic and numeric gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-300);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let d = (a - n).abs();
            if d == 0.0 {
                0.0
            } else {
                d / a.abs().max(n.abs()).max(floor)
            }
        })
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` for every entry.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(&x);
            x[i] = orig - step;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Check all inputs of a tape-recorded function reduced by a random cotangent.
fn check_tape(inputs: &[Tensor], step: f64, rng: &mut ChaCha8Rng, build: &Build<'_>) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(&mut tape, &vars)?;
        Ok((tape, vars, y))
    };
    let (tape, vars, y) = eval(inputs)?;
    let shape = tape.value(y).shape().to_vec();
    let cot = random_tensor(&shape, rng, 1.0);
    let grads = tape.backward_with(y, cot.clone());
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        analytic.extend(g);
        let mut xs = inputs.to_vec();
        let n = numeric_gradient(inputs[k].data(), step, |x| {
            xs[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).expect("same shape");
            let (t, _, y) = eval(&xs).expect("instance evaluated once already");
            t.value(y).dot(&cot)
        });
        numeric.extend(n);
    }
    Ok((analytic.len(), analytic, numeric))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> Result<Camera> {
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.3..0.5);
    let eye = 2.0 * Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos());
    let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::y())?;
    Ok(Camera::new(Intrinsics::centered(size as f64, size, size)?, pose))
}

struct Checker {
    cfg: GradcheckConfig,
    reports: Vec<OpReport>,
}

impl Checker {
    fn record(&mut self, op: &str, entries: usize, err: f64) {
        match self.reports.iter_mut().find(|r| r.op == op) {
            Some(r) => {
                r.entries += entries;
                r.max_rel_error = r.max_rel_error.max(err);
            }
            None => self.reports.push(OpReport {
                op: op.to_string(),
                entries,
                max_rel_error: err,
            }),
        }
    }

    fn tape(&mut self, op: &str, rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build<'_>) -> Result<()> {
        let (n, a, num) = check_tape(inputs, self.cfg.step, rng, build)?;
        self.record(op, n, max_relative_error(&a, &num));
        Ok(())
    }

    fn bilinear(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (h, w, c) = (5, 6, 3);
        let f = random_tensor(&[h, w, c], rng, 1.0);
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(-0.5..w as f64 - 0.5), rng.random_range(-0.5..h as f64 - 0.5)])
            .collect();
        let up: Vec<f64> = (0..pts.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map = |d: &[f64]| FeatureMap::new(h, w, c, d.to_vec()).expect("shape matches");
        let analytic = bilinear_sample_vjp(&map(f.data()), &pts, &up)?.data;
        let numeric = numeric_gradient(f.data(), self.cfg.step, |d| {
            bilinear_sample(&map(d), &pts).0.iter().zip(&up).map(|(a, b)| a * b).sum()
        });
        self.record("bilinear", analytic.len(), max_relative_error(&analytic, &numeric));
        Ok(())
    }

    fn unproject(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let cam = random_camera(rng, 6)?;
        let spec = VoxelGridSpec::unit(4);
        let f = random_tensor(&[6, 6, 2], rng, 1.0);
        self.tape("unproject", rng, &[f], &|t, v| {
            t.unproject(v[0], UnprojectPlan::new(&cam, &spec), GeomFeatureConfig::ALL)
        })
    }

    fn project(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let cam = random_camera(rng, 5)?;
        let spec = VoxelGridSpec::unit(4);
        let g = random_tensor(&[4, 4, 4, 2], rng, 1.0);
        self.tape("project-trilinear", rng, &[g], &|t, v| {
            t.project(v[0], ProjectPlan::new(&cam, &spec, 6, Interp::Trilinear)?)
        })
    }

    fn gru(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (n, cin, hid, k) = (3, 2, 2, 3);
        let mut inputs = vec![random_tensor(&[n, n, n, hid], rng, 0.8), random_tensor(&[n, n, n, cin], rng, 1.0)];
        for s in gru_shapes(cin, hid, k) {
            let scale = if s.len() == 5 { 0.3 } else { 1.0 };
            inputs.push(random_tensor(&s, rng, scale));
        }
        self.tape("gru-cell", rng, &inputs, &|t, v| {
            let p = GruCellParams::from_array(std::array::from_fn(|i| v[2 + i]));
            gru_step_on(t, v[0], v[1], &p)
        })
    }

    fn layers(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        // Convolutions.
        for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let inputs = [
                random_tensor(&[5, 6, 3], rng, 1.0),
                random_tensor(&[3, 3, 3, 4], rng, 0.5),
                random_tensor(&[4], rng, 0.5),
            ];
            self.tape("conv2d", rng, &inputs, &|t, v| t.conv(v[0], v[1], Some(v[2]), stride, padding))?;
        }
        for stride in [1, 2] {
            let inputs = [
                random_tensor(&[4, 3, 4, 2], rng, 1.0),
                random_tensor(&[3, 3, 3, 2, 3], rng, 0.5),
                random_tensor(&[3], rng, 0.5),
            ];
            self.tape("conv3d", rng, &inputs, &|t, v| t.conv(v[0], v[1], Some(v[2]), stride, Padding::Same))?;
        }

        // Normalizations.
        let norm_inputs = [random_tensor(&[4, 5, 3], rng, 2.0), random_tensor(&[3], rng, 1.5), random_tensor(&[3], rng, 1.0)];
        self.tape("instance-norm", rng, &norm_inputs, &|t, v| t.instance_norm(v[0], v[1], v[2], 1e-5))?;
        self.tape("layer-norm", rng, &norm_inputs, &|t, v| t.layer_norm(v[0], v[1], v[2], LN_EPS))?;

        // Smooth elementwise and layout operators.
        let x = random_tensor(&[3, 4, 2], rng, 2.0);
        let y = random_tensor(&[3, 4, 2], rng, 2.0);
        self.tape("sigmoid", rng, &[x.clone()], &|t, v| Ok(t.sigmoid(v[0])))?;
        self.tape("tanh", rng, &[x.clone()], &|t, v| Ok(t.tanh(v[0])))?;
        self.tape("softmax", rng, &[x.clone()], &|t, v| Ok(t.softmax_channels(v[0])))?;
        self.tape("mul", rng, &[x.clone(), y.clone()], &|t, v| t.mul(v[0], v[1]))?;
        self.tape("concat", rng, &[x.clone(), y.clone()], &|t, v| t.concat_channels(&[v[0], v[1]]))?;
        self.tape("upsample", rng, &[x.clone()], &|t, v| t.upsample_nearest(v[0], 2))?;
        self.tape("mean-pool", rng, &[x.clone(), y.clone()], &|t, v| t.mean_of(&[v[0], v[1]]))?;
        let relu_in = away_from_zero(random_tensor(&[3, 4, 2], rng, 2.0), 0.05);
        self.tape("relu", rng, &[relu_in], &|t, v| Ok(t.relu(v[0])))?;
        let (a, b) = separated_pair(rng, &[3, 4, 2], 0.05);
        self.tape("max-pool", rng, &[a, b], &|t, v| t.max_of(&[v[0], v[1]]))?;

        // Heads.
        let vin = [random_tensor(&[3, 3, 2, 4], rng, 1.0), random_tensor(&[1, 1, 1, 4, 2], rng, 1.0), random_tensor(&[2], rng, 0.5)];
        self.tape("voxel-head", rng, &vin, &|t, v| voxel_head(t, v[0], v[1], v[2]))?;
        let rin = ray_head_instance(rng, 16, 0.02);
        self.tape("ray-reduce-head", rng, &rin, &|t, v| {
            let layers: Vec<(Var, Var)> = v[1..].chunks(2).map(|c| (c[0], c[1])).collect();
            ray_reduce_head(t, v[0], &layers)
        })?;

        // Losses.
        let p = Tensor::new(vec![12], (0..12).map(|_| rng.random_range(0.05..0.95)).collect())?;
        let target: Vec<f64> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
        self.tape("bce-loss", rng, &[p], &|t, v| t.bce_loss(v[0], &target))?;
        let gt: Vec<f64> = (0..12).map(|_| rng.random_range(1.0..3.0)).collect();
        let pred: Vec<f64> = gt
            .iter()
            .map(|g| g + rng.random_range(0.05..0.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
        self.tape("l1-loss", rng, &[Tensor::new(vec![12], pred)?], &|t, v| t.l1_loss(v[0], &gt, &mask))?;
        Ok(())
    }
}

fn away_from_zero(mut x: Tensor, margin: f64) -> Tensor {
    for v in x.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin } * 2.0;
        }
    }
    x
}

/// Two tensors whose entries differ everywhere by more than `gap`.
fn separated_pair(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> (Tensor, Tensor) {
    let a = random_tensor(shape, rng, 1.0);
    let mut b = random_tensor(shape, rng, 1.0);
    for (y, x) in b.data_mut().iter_mut().zip(a.data()) {
        if (*y - x).abs() < gap {
            *y = x + 2.0 * gap;
        }
    }
    (a, b)
}

/// Input and layer parameters of a ray-reduction head whose rectifier inputs
/// all stay at least `margin` away from zero, so small perturbations never
/// cross a kink.
fn ray_head_instance(rng: &mut ChaCha8Rng, channels: usize, margin: f64) -> Vec<Tensor> {
    let plan = channel_plan(channels);
    loop {
        let mut v = vec![random_tensor(&[2, 3, channels], rng, 1.0)];
        for c in plan.windows(2) {
            v.push(random_tensor(&[1, 1, c[0], c[1]], rng, (3.0 / c[0] as f64).sqrt()));
            v.push(random_tensor(&[c[1]], rng, 0.3));
        }
        let mut tape = Tape::new();
        let mut y = tape.constant(v[0].clone());
        let mut ok = true;
        for (i, c) in v[1..].chunks(2).enumerate() {
            let (w, b) = (tape.constant(c[0].clone()), tape.constant(c[1].clone()));
            y = tape.conv(y, w, Some(b), 1, Padding::Same).expect("consistent head");
            if i + 1 < plan.len() - 1 {
                ok &= tape.value(y).data().iter().all(|x| x.abs() > margin);
                y = tape.relu(y);
            }
        }
        if ok {
            return v;
        }
    }
}

/// Run the selected checks and return one report per operator.
pub fn run(group: OpGroup, cfg: GradcheckConfig) -> Result<Vec<OpReport>> {
    if cfg.trials == 0 || !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck needs at least one trial and a positive step"));
    }
    let mut checker = Checker {
        cfg,
        reports: Vec::new(),
    };
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let want = |g: OpGroup| group == OpGroup::All || group == g;
        if want(OpGroup::Bilinear) {
            checker.bilinear(&mut rng)?;
        }
        if want(OpGroup::Unproject) {
            checker.unproject(&mut rng)?;
        }
        if want(OpGroup::Project) {
            checker.project(&mut rng)?;
        }
        if want(OpGroup::Gru) {
            checker.gru(&mut rng)?;
        }
        if want(OpGroup::Layers) {
            checker.layers(&mut rng)?;
        }
    }
    Ok(checker.reports)
}

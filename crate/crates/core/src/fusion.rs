//! Combining per-view grids into one grid.
//!
//! Pointwise pooling sorts the per-voxel values before reducing, so the result
//! does not depend on the order of the input grids down to the last bit. The
//! recurrent variant is a convolutional GRU whose gate pre-activations are
//! layer-normalized over channels at every voxel.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::nnkit::{Padding, ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

fn check_grids(grids: &[FeatureGrid]) -> Result<()> {
    let Some(first) = grids.first() else {
        return Err(Error::invalid("fusion needs at least one grid"));
    };
    for (n, g) in grids.iter().enumerate().skip(1) {
        if !g.same_layout(first) {
            return Err(Error::shape(format!(
                "grid {n} has layout {}^3x{}, grid 0 has {}^3x{}",
                g.spec.resolution, g.channels, first.spec.resolution, first.channels
            )));
        }
    }
    Ok(())
}

/// Elementwise max or mean across grids.
pub fn fuse_pointwise(grids: &[FeatureGrid], mode: PoolMode) -> Result<FeatureGrid> {
    check_grids(grids)?;
    let first = &grids[0];
    let n = grids.len();
    let mut out = FeatureGrid::zeros(first.spec, first.channels);
    let mut vals = vec![0.0; n];
    for (i, o) in out.data.iter_mut().enumerate() {
        for (v, g) in vals.iter_mut().zip(grids) {
            *v = g.data[i];
        }
        vals.sort_unstable_by(f64::total_cmp);
        *o = match mode {
            PoolMode::Max => vals[n - 1],
            PoolMode::Mean => vals.iter().sum::<f64>() / n as f64,
        };
    }
    Ok(out)
}

/// Weights of one convolutional GRU cell.
///
/// Kernels are `[k, k, k, C_in, C_h]` for the input path and `[k, k, k, C_h, C_h]`
/// for the hidden path; biases, layer-norm gains and shifts have `C_h` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams<T> {
    pub w_zx: T,
    pub w_zh: T,
    pub b_z: T,
    pub w_rx: T,
    pub w_rh: T,
    pub b_r: T,
    pub w_hx: T,
    pub w_hh: T,
    pub b_h: T,
    pub ln_z_gain: T,
    pub ln_z_shift: T,
    pub ln_r_gain: T,
    pub ln_r_shift: T,
    pub ln_h_gain: T,
    pub ln_h_shift: T,
}

impl<T> GruCellParams<T> {
    pub const NAMES: [&'static str; 15] = [
        "w_zx", "w_zh", "b_z", "w_rx", "w_rh", "b_r", "w_hx", "w_hh", "b_h", "ln_z_gain",
        "ln_z_shift", "ln_r_gain", "ln_r_shift", "ln_h_gain", "ln_h_shift",
    ];

    pub fn as_array(&self) -> [&T; 15] {
        [
            &self.w_zx, &self.w_zh, &self.b_z, &self.w_rx, &self.w_rh, &self.b_r, &self.w_hx,
            &self.w_hh, &self.b_h, &self.ln_z_gain, &self.ln_z_shift, &self.ln_r_gain,
            &self.ln_r_shift, &self.ln_h_gain, &self.ln_h_shift,
        ]
    }

    pub fn from_array(a: [T; 15]) -> Self {
        let [w_zx, w_zh, b_z, w_rx, w_rh, b_r, w_hx, w_hh, b_h, ln_z_gain, ln_z_shift, ln_r_gain, ln_r_shift, ln_h_gain, ln_h_shift] =
            a;
        Self {
            w_zx,
            w_zh,
            b_z,
            w_rx,
            w_rh,
            b_r,
            w_hx,
            w_hh,
            b_h,
            ln_z_gain,
            ln_z_shift,
            ln_r_gain,
            ln_r_shift,
            ln_h_gain,
            ln_h_shift,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GruCellParams<U> {
        GruCellParams::from_array(self.as_array().map(&mut f))
    }
}

/// Shapes of the 15 tensors, in [`GruCellParams::NAMES`] order.
pub fn gru_shapes(cin: usize, hidden: usize, k: usize) -> [Vec<usize>; 15] {
    let wx = vec![k, k, k, cin, hidden];
    let wh = vec![k, k, k, hidden, hidden];
    let v = vec![hidden];
    [
        wx.clone(), wh.clone(), v.clone(), wx.clone(), wh.clone(), v.clone(), wx, wh, v.clone(),
        v.clone(), v.clone(), v.clone(), v.clone(), v.clone(), v,
    ]
}

impl GruCellParams<Tensor> {
    /// Zero kernels and biases, unit gains, zero shifts.
    pub fn zeros(cin: usize, hidden: usize, k: usize) -> Self {
        let shapes = gru_shapes(cin, hidden, k);
        let mut n = 0;
        GruCellParams::from_array(shapes.map(|s| {
            let gain = Self::NAMES[n].ends_with("_gain");
            n += 1;
            Tensor::filled(&s, if gain { 1.0 } else { 0.0 })
        }))
    }

    /// Kernels and biases uniform in `±scale`, gains near 1, shifts near 0.
    pub fn random(cin: usize, hidden: usize, k: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let mut p = Self::zeros(cin, hidden, k);
        let mut all = p.as_array().map(Clone::clone);
        for (t, name) in all.iter_mut().zip(Self::NAMES) {
            let base = if name.ends_with("_gain") { 1.0 } else { 0.0 };
            for x in t.data_mut() {
                *x = base + rng.random_range(-scale..scale);
            }
        }
        p = GruCellParams::from_array(all);
        p
    }

    pub fn kernel_size(&self) -> usize {
        self.w_zx.shape()[0]
    }

    pub fn input_channels(&self) -> usize {
        self.w_zx.shape()[3]
    }

    pub fn hidden_channels(&self) -> usize {
        self.w_zx.shape()[4]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_zx.shape();
        if shape.len() != 5 {
            return Err(Error::shape(format!("w_zx must be rank 5, got {shape:?}")));
        }
        let k = shape[0];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("GRU kernel size {k} must be odd")));
        }
        let expected = gru_shapes(shape[3], shape[4], k);
        for ((t, s), name) in self.as_array().iter().zip(&expected).zip(Self::NAMES) {
            if t.shape() != &s[..] {
                return Err(Error::shape(format!(
                    "GRU parameter {name} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl GruCellParams<ParamId> {
    /// Register a freshly initialized cell in `store` under `prefix`.
    pub fn register(store: &mut ParamStore, prefix: &str, cin: usize, hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let shapes = gru_shapes(cin, hidden, k);
        let mut n = 0;
        GruCellParams::from_array(shapes.map(|s| {
            let name = Self::NAMES[n];
            n += 1;
            let full = format!("{prefix}.{name}");
            if s.len() == 5 {
                store.add_he(full, &s, k * k * k * s[3], rng)
            } else if name.ends_with("_gain") {
                store.add_filled(full, &s, 1.0)
            } else {
                store.add_filled(full, &s, 0.0)
            }
        }))
    }

    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore) -> GruCellParams<Var> {
        self.map(|&id| tape.param(store, id))
    }
}

fn gate(tape: &mut Tape, x: Var, h: Var, wx: Var, wh: Var, b: Var, gain: Var, shift: Var) -> Result<Var> {
    let a = tape.conv(x, wx, Some(b), 1, Padding::Same)?;
    let c = tape.conv(h, wh, None, 1, Padding::Same)?;
    let s = tape.add(a, c)?;
    tape.layer_norm(s, gain, shift, LN_EPS)
}

/// One GRU update recorded on `tape`. `h` and `x` are `[V, V, V, C]` tensors.
pub fn gru_step_on(tape: &mut Tape, h: Var, x: Var, p: &GruCellParams<Var>) -> Result<Var> {
    let pre_z = gate(tape, x, h, p.w_zx, p.w_zh, p.b_z, p.ln_z_gain, p.ln_z_shift)?;
    let z = tape.sigmoid(pre_z);
    let pre_r = gate(tape, x, h, p.w_rx, p.w_rh, p.b_r, p.ln_r_gain, p.ln_r_shift)?;
    let r = tape.sigmoid(pre_r);
    let rh = tape.mul(r, h)?;
    let pre_h = gate(tape, x, rh, p.w_hx, p.w_hh, p.b_h, p.ln_h_gain, p.ln_h_shift)?;
    let cand = tape.tanh(pre_h);
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

fn check_step(h: &FeatureGrid, x: &FeatureGrid, p: &GruCellParams<Tensor>) -> Result<()> {
    p.validate()?;
    if h.spec != x.spec {
        return Err(Error::shape("hidden state and input grids have different specs"));
    }
    if x.channels != p.input_channels() || h.channels != p.hidden_channels() {
        return Err(Error::shape(format!(
            "GRU expects {} input and {} hidden channels, got {} and {}",
            p.input_channels(),
            p.hidden_channels(),
            x.channels,
            h.channels
        )));
    }
    Ok(())
}

pub fn gru_step(h: &FeatureGrid, x: &FeatureGrid, p: &GruCellParams<Tensor>) -> Result<FeatureGrid> {
    check_step(h, x, p)?;
    let mut tape = Tape::new();
    let pv = p.map(|t| tape.constant(t.clone()));
    let hv = tape.constant(h.clone().into());
    let xv = tape.constant(x.clone().into());
    let out = gru_step_on(&mut tape, hv, xv, &pv)?;
    tape.value(out).to_feature_grid(h.spec)
}

/// Fold [`gru_step`] over `grids` in the given order starting from `h0`.
pub fn fuse_recurrent(grids: &[FeatureGrid], p: &GruCellParams<Tensor>, h0: &FeatureGrid) -> Result<FeatureGrid> {
    check_grids(grids)?;
    let mut h = h0.clone();
    for x in grids {
        h = gru_step(&h, x, p)?;
    }
    Ok(h)
}

/// Largest absolute voxel difference between the recurrent fusion in the
/// given order and in `orderings` random permutations of it.
pub fn order_sensitivity(
    grids: &[FeatureGrid],
    p: &GruCellParams<Tensor>,
    h0: &FeatureGrid,
    orderings: usize,
    seed: u64,
) -> Result<f64> {
    let reference = fuse_recurrent(grids, p, h0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut worst = 0.0f64;
    for _ in 0..orderings {
        order.shuffle(&mut rng);
        let permuted: Vec<FeatureGrid> = order.iter().map(|&i| grids[i].clone()).collect();
        let out = fuse_recurrent(&permuted, p, h0)?;
        for (a, b) in out.data.iter().zip(&reference.data) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

//! Operators recordable on a [`Tape`], each with its backward rule.

use crate::diffops::{GeomFeatureConfig, ProjectPlan, UnprojectPlan};
use crate::error::{Error, Result};
use crate::nnkit::conv::{conv_backward, conv_forward, ConvGeom, Padding};
use crate::nnkit::tape::{Backward, Tape, Var};
use crate::nnkit::tensor::Tensor;

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("operator produced a consistent shape")
}

// ---------------------------------------------------------------- convolution

struct ConvOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl Backward for ConvOp {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let grads = conv_backward(&self.geom, inputs[0].data(), inputs[1].data(), g.data(), needs[0]);
        let mut out = vec![
            grads.x.map(|gx| t(inputs[0].shape(), gx)),
            Some(t(inputs[1].shape(), grads.w)),
        ];
        if self.has_bias {
            out.push(Some(t(inputs[2].shape(), grads.bias)));
        }
        out
    }
}

// ---------------------------------------------------------------- elementwise

enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Affine(f64),
}

impl Backward for Unary {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let data: Vec<f64> = match self {
            Unary::Relu => g
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            Unary::Sigmoid => g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            Unary::Tanh => g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
            Unary::Affine(a) => g.data().iter().map(|g| g * a).collect(),
        };
        vec![Some(t(x.shape(), data))]
    }
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl Backward for Binary {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        match self {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.map(|x| -x))],
            Binary::Mul => {
                let ga = needs[0].then(|| {
                    t(a.shape(), g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect())
                });
                let gb = needs[1].then(|| {
                    t(b.shape(), g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect())
                });
                vec![ga, gb]
            }
        }
    }
}

// ---------------------------------------------------------------- layout

struct ConcatChannels {
    widths: Vec<usize>,
}

impl Backward for ConcatChannels {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let total: usize = self.widths.iter().sum();
        let mut outs: Vec<Vec<f64>> = inputs.iter().map(|x| Vec::with_capacity(x.len())).collect();
        for row in g.data().chunks_exact(total) {
            let mut o = 0;
            for (w, out) in self.widths.iter().zip(outs.iter_mut()) {
                out.extend_from_slice(&row[o..o + w]);
                o += w;
            }
        }
        outs.into_iter()
            .zip(inputs)
            .map(|(d, x)| Some(t(x.shape(), d)))
            .collect()
    }
}

struct SelectChannel {
    channel: usize,
}

impl Backward for SelectChannel {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let c = x.channels();
        let mut out = vec![0.0; x.len()];
        for (row, gv) in out.chunks_exact_mut(c).zip(g.data()) {
            row[self.channel] = *gv;
        }
        vec![Some(t(x.shape(), out))]
    }
}

struct Upsample {
    factor: usize,
}

impl Backward for Upsample {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let s = self.factor;
        let mut out = vec![0.0; x.len()];
        for v in 0..h * s {
            for u in 0..w * s {
                let src = ((v / s) * w + u / s) * c;
                let dst = (v * w * s + u) * c;
                for ch in 0..c {
                    out[src + ch] += g.data()[dst + ch];
                }
            }
        }
        vec![Some(t(x.shape(), out))]
    }
}

// ---------------------------------------------------------------- normalization

/// Shared backward of instance and layer normalization: each group of
/// elements was standardized and then scaled per channel.
struct Normalize {
    /// Standardized values, same layout as the input.
    xhat: Vec<f64>,
    /// `1 / sqrt(var + eps)` per group.
    inv_std: Vec<f64>,
    per_channel: bool,
}

impl Normalize {
    fn group_of(&self, pos: usize, ch: usize) -> usize {
        if self.per_channel {
            ch
        } else {
            pos
        }
    }
}

impl Backward for Normalize {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let gain = inputs[1].data();
        let c = x.channels();
        let positions = x.positions();
        let groups = self.inv_std.len();
        let group_size = if self.per_channel { positions } else { c } as f64;
        let mut ggain = vec![0.0; c];
        let mut gshift = vec![0.0; c];
        // Per-group sums of dL/dxhat and dL/dxhat * xhat.
        let mut sum_g = vec![0.0; groups];
        let mut sum_gx = vec![0.0; groups];
        for p in 0..positions {
            for ch in 0..c {
                let i = p * c + ch;
                let gy = g.data()[i];
                ggain[ch] += gy * self.xhat[i];
                gshift[ch] += gy;
                let gxh = gy * gain[ch];
                let grp = self.group_of(p, ch);
                sum_g[grp] += gxh;
                sum_gx[grp] += gxh * self.xhat[i];
            }
        }
        let gx = needs[0].then(|| {
            let mut out = vec![0.0; x.len()];
            for p in 0..positions {
                for ch in 0..c {
                    let i = p * c + ch;
                    let grp = self.group_of(p, ch);
                    let gxh = g.data()[i] * gain[ch];
                    out[i] = self.inv_std[grp]
                        * (gxh - sum_g[grp] / group_size - self.xhat[i] * sum_gx[grp] / group_size);
                }
            }
            t(x.shape(), out)
        });
        vec![gx, Some(t(inputs[1].shape(), ggain)), Some(t(inputs[2].shape(), gshift))]
    }
}

struct Softmax;

impl Backward for Softmax {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], y: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let c = y.channels();
        let mut out = vec![0.0; y.len()];
        for ((o, yr), gr) in out
            .chunks_exact_mut(c)
            .zip(y.data().chunks_exact(c))
            .zip(g.data().chunks_exact(c))
        {
            let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, y), g) in o.iter_mut().zip(yr).zip(gr) {
                *o = y * (g - s);
            }
        }
        vec![Some(t(inputs[0].shape(), out))]
    }
}

// ---------------------------------------------------------------- losses and reductions

struct Bce {
    target: Vec<f64>,
}

impl Backward for Bce {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let n = p.len() as f64;
        let scale = g.item() / n;
        let data = p
            .data()
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                    0.0
                } else {
                    scale * (-y / p + (1.0 - y) / (1.0 - p))
                }
            })
            .collect();
        vec![Some(t(p.shape(), data))]
    }
}

struct L1 {
    target: Vec<f64>,
    mask: Vec<bool>,
    count: usize,
}

impl Backward for L1 {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let scale = g.item() / self.count as f64;
        let data = x
            .data()
            .iter()
            .zip(&self.target)
            .zip(&self.mask)
            .map(|((&p, &y), &m)| {
                if !m || p == y {
                    0.0
                } else {
                    scale * (p - y).signum()
                }
            })
            .collect();
        vec![Some(t(x.shape(), data))]
    }
}

struct Dot {
    weights: Vec<f64>,
}

impl Backward for Dot {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.item();
        vec![Some(t(inputs[0].shape(), self.weights.iter().map(|w| s * w).collect()))]
    }
}

struct Mean {
    count: usize,
}

impl Backward for Mean {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let scale = 1.0 / self.count as f64;
        inputs.iter().map(|_| Some(g.map(|x| x * scale))).collect()
    }
}

struct Max {
    /// Index of the input that supplied each output element.
    argmax: Vec<u32>,
}

impl Backward for Max {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        (0..inputs.len())
            .map(|k| {
                needs[k].then(|| {
                    let data = g
                        .data()
                        .iter()
                        .zip(&self.argmax)
                        .map(|(g, &a)| if a as usize == k { *g } else { 0.0 })
                        .collect();
                    t(inputs[k].shape(), data)
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------- 2D↔3D

struct UnprojectOp {
    plan: UnprojectPlan,
    channels: usize,
}

impl Backward for UnprojectOp {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let spec = self.plan.spec();
        let up = g.to_feature_grid(spec).expect("gradient matches grid layout");
        let grad = self.plan.vjp(self.channels, &up).expect("gradient matches plan");
        vec![Some(t(inputs[0].shape(), grad.data))]
    }
}

struct ProjectOp {
    plan: ProjectPlan,
    channels: usize,
}

impl Backward for ProjectOp {
    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let up = g.to_feature_map().expect("gradient is a raster");
        let grad = self.plan.vjp(self.channels, &up).expect("gradient matches plan");
        vec![Some(t(inputs[0].shape(), grad.data))]
    }
}

// ---------------------------------------------------------------- recording API

impl Tape {
    /// Cross-correlation over 2 (`x: [H, W, Cin]`, `w: [kh, kw, Cin, Cout]`)
    /// or 3 (`x: [D, H, W, Cin]`, `w: [kd, kh, kw, Cin, Cout]`) spatial axes.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (input, kernel, strides, cin, cout, is_2d) = match (xs.len(), ws.len()) {
            (3, 4) => ([1, xs[0], xs[1]], [1, ws[0], ws[1]], [1, stride, stride], ws[2], ws[3], true),
            (4, 5) => ([xs[0], xs[1], xs[2]], [ws[0], ws[1], ws[2]], [stride; 3], ws[3], ws[4], false),
            _ => {
                return Err(Error::shape(format!(
                    "conv expects [H,W,C]/[kh,kw,ci,co] or [D,H,W,C]/[kd,kh,kw,ci,co], got {xs:?} and {ws:?}"
                )))
            }
        };
        if *xs.last().unwrap() != cin {
            return Err(Error::shape(format!(
                "conv input has {} channels, kernel expects {cin}",
                xs.last().unwrap()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(format!(
                    "bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom::new(input, kernel, strides, padding, cin, cout)?;
        let out = conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let o = geom.output;
        let shape = if is_2d {
            vec![o[1], o[2], cout]
        } else {
            vec![o[0], o[1], o[2], cout]
        };
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            t(&shape, out),
            inputs,
            Box::new(ConvOp {
                geom,
                has_bias: bias.is_some(),
            }),
        ))
    }

    fn unary(&mut self, x: Var, op: Unary, f: impl Fn(f64) -> f64) -> Var {
        let y = self.value(x).map(f);
        self.push(y, vec![x], Box::new(op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh, f64::tanh)
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.unary(x, Unary::Affine(scale), move |v| scale * v + offset)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "elementwise operands")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(t(&shape, data), vec![a, b], Box::new(op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let positions = first.positions();
        let spatial = first.shape()[..first.shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.shape()[..v.shape().len() - 1] != spatial[..] {
                return Err(Error::shape(format!(
                    "concat: spatial shape {:?} vs {spatial:?}",
                    v.shape()
                )));
            }
            widths.push(v.channels());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(positions * total);
        for p in 0..positions {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[p * w..(p + 1) * w]);
            }
        }
        let mut shape = spatial;
        shape.push(total);
        Ok(self.push(t(&shape, data), xs.to_vec(), Box::new(ConcatChannels { widths })))
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let v = self.value(x);
        let c = v.channels();
        if channel >= c {
            return Err(Error::shape(format!("channel {channel} of {c}")));
        }
        let data = v.data().chunks_exact(c).map(|r| r[channel]).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        Ok(self.push(t(&shape, data), vec![x], Box::new(SelectChannel { channel })))
    }

    /// Nearest-neighbor upsampling of an `[H, W, C]` raster.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        let [h, w, c] = match v.shape() {
            &[h, w, c] => [h, w, c],
            s => return Err(Error::shape(format!("upsample expects [H,W,C], got {s:?}"))),
        };
        let s = factor;
        let mut data = vec![0.0; h * w * s * s * c];
        for vv in 0..h * s {
            for u in 0..w * s {
                let src = ((vv / s) * w + u / s) * c;
                let dst = (vv * w * s + u) * c;
                data[dst..dst + c].copy_from_slice(&v.data()[src..src + c]);
            }
        }
        Ok(self.push(t(&[h * s, w * s, c], data), vec![x], Box::new(Upsample { factor })))
    }

    fn normalize(&mut self, x: Var, gain: Var, shift: Var, eps: f64, per_channel: bool) -> Result<Var> {
        let v = self.value(x);
        let c = v.channels();
        let positions = v.positions();
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(Error::shape(format!("normalization affine must have {c} entries")));
        }
        if per_channel && positions < 2 {
            return Err(Error::shape("instance normalization needs at least 2 positions"));
        }
        let groups = if per_channel { c } else { positions };
        let group_size = if per_channel { positions } else { c } as f64;
        let group = |p: usize, ch: usize| if per_channel { ch } else { p };
        let mut mean = vec![0.0; groups];
        for p in 0..positions {
            for ch in 0..c {
                mean[group(p, ch)] += v.data()[p * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= group_size);
        let mut var = vec![0.0; groups];
        for p in 0..positions {
            for ch in 0..c {
                let d = v.data()[p * c + ch] - mean[group(p, ch)];
                var[group(p, ch)] += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / group_size + eps).sqrt()).collect();
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        let (gv, sv) = (self.value(gain).data(), self.value(shift).data());
        for p in 0..positions {
            for ch in 0..c {
                let i = p * c + ch;
                let grp = group(p, ch);
                xhat[i] = (v.data()[i] - mean[grp]) * inv_std[grp];
                out[i] = gv[ch] * xhat[i] + sv[ch];
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.push(
            t(&shape, out),
            vec![x, gain, shift],
            Box::new(Normalize {
                xhat,
                inv_std,
                per_channel,
            }),
        ))
    }

    /// Per-channel standardization over all spatial positions, then `gain * x + shift`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        self.normalize(x, gain, shift, eps, true)
    }

    /// Per-position standardization over the channel axis, then `gain * x + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        self.normalize(x, gain, shift, eps, false)
    }

    /// Softmax over the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.channels();
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        let shape = v.shape().to_vec();
        self.push(t(&shape, data), vec![x], Box::new(Softmax))
    }

    /// Mean binary cross-entropy of probabilities `p` against `{0, 1}` targets.
    pub fn bce_loss(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(p);
        if v.len() != target.len() {
            return Err(Error::shape(format!(
                "bce: {} predictions vs {} targets",
                v.len(),
                target.len()
            )));
        }
        let n = v.len() as f64;
        let loss = v
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![p],
            Box::new(Bce {
                target: target.to_vec(),
            }),
        ))
    }

    /// Mean absolute difference over masked entries.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let v = self.value(pred);
        if v.len() != target.len() || v.len() != mask.len() {
            return Err(Error::shape("l1: prediction, target and mask sizes differ"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("l1 loss over an empty mask"));
        }
        let loss = v
            .data()
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((p, y), _)| (p - y).abs())
            .sum::<f64>()
            / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            vec![pred],
            Box::new(L1 {
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            }),
        ))
    }

    /// `⟨x, weights⟩` as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let v = self.value(x);
        same_shape(v, weights, "dot")?;
        let s = v.dot(weights);
        Ok(self.push(
            Tensor::scalar(s),
            vec![x],
            Box::new(Dot {
                weights: weights.data().to_vec(),
            }),
        ))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("mean of an empty list"));
        }
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            same_shape(&acc, self.value(x), "mean")?;
            acc.add_assign(self.value(x));
        }
        let n = xs.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a /= n);
        Ok(self.push(acc, xs.to_vec(), Box::new(Mean { count: xs.len() })))
    }

    /// Elementwise max of same-shaped tensors; ties go to the earliest input.
    pub fn max_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("max of an empty list"));
        }
        let mut acc = self.value(xs[0]).clone();
        let mut argmax = vec![0u32; acc.len()];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            let v = self.value(x);
            same_shape(&acc, v, "max")?;
            for ((a, am), &b) in acc.data_mut().iter_mut().zip(argmax.iter_mut()).zip(v.data()) {
                if b > *a {
                    *a = b;
                    *am = k as u32;
                }
            }
        }
        Ok(self.push(acc, xs.to_vec(), Box::new(Max { argmax })))
    }

    /// Unproject an `[H, W, C]` feature raster into a `[V, V, V, C + extra]` grid.
    pub fn unproject(&mut self, f: Var, plan: UnprojectPlan, gcfg: GeomFeatureConfig) -> Result<Var> {
        let map = self.value(f).to_feature_map()?;
        let grid = plan.forward(&map, gcfg)?;
        let channels = map.channels;
        Ok(self.push(grid.into(), vec![f], Box::new(UnprojectOp { plan, channels })))
    }

    /// Project a `[V, V, V, C]` grid into an `[H, W, N_z * C]` raster.
    pub fn project(&mut self, g: Var, plan: ProjectPlan) -> Result<Var> {
        let grid = self.value(g).to_feature_grid(plan.spec())?;
        let map = plan.forward(&grid)?;
        let channels = grid.channels;
        Ok(self.push(map.into(), vec![g], Box::new(ProjectOp { plan, channels })))
    }
}

//! Channel-last convolution kernels (cross-correlation) for 2 and 3 spatial
//! dimensions, lowered to matrix products over im2col row blocks.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2`; output size `ceil(input / stride)`. Odd kernels only.
    Same,
    /// No padding; output size `(input - k) / stride + 1`.
    Valid,
}

/// Resolved geometry of one convolution, always expressed with three spatial
/// axes (2D convolutions use a unit depth axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let mut pad = [0; 3];
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(Error::invalid("kernel and stride must be positive"));
            }
            match padding {
                Padding::Same => {
                    if kernel[a] % 2 == 0 {
                        return Err(Error::invalid("same padding needs odd kernel sizes"));
                    }
                    pad[a] = kernel[a] / 2;
                    output[a] = input[a].div_ceil(stride[a]);
                }
                Padding::Valid => {
                    if input[a] < kernel[a] {
                        return Err(Error::shape(format!(
                            "input extent {} smaller than kernel {}",
                            input[a], kernel[a]
                        )));
                    }
                    output[a] = (input[a] - kernel[a]) / stride[a] + 1;
                }
            }
        }
        Ok(Self {
            input,
            kernel,
            stride,
            pad,
            output,
            cin,
            cout,
        })
    }

    /// Columns of the lowered input: one per kernel tap and input channel.
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    fn rows_per_block(&self) -> usize {
        ((1 << 17) / self.patch_len().max(1)).max(16)
    }

    /// Input offset (position index) of tap `(a, b, c)` for output row `r`,
    /// or `None` when the tap falls into padding.
    #[inline]
    fn for_each_tap(&self, r: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, oh, ow] = self.output;
        let (od_i, oh_i, ow_i) = (r / (oh * ow), (r / ow) % oh, r % ow);
        let [id, ih, iw] = self.input;
        let mut tap = 0;
        for a in 0..self.kernel[0] {
            let z = (od_i * self.stride[0] + a) as isize - self.pad[0] as isize;
            for b in 0..self.kernel[1] {
                let y = (oh_i * self.stride[1] + b) as isize - self.pad[1] as isize;
                for c in 0..self.kernel[2] {
                    let x = (ow_i * self.stride[2] + c) as isize - self.pad[2] as isize;
                    let inside = z >= 0
                        && y >= 0
                        && x >= 0
                        && (z as usize) < id
                        && (y as usize) < ih
                        && (x as usize) < iw;
                    let pos = inside.then(|| ((z as usize * ih) + y as usize) * iw + x as usize);
                    f(tap, pos);
                    tap += 1;
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], rows: std::ops::Range<usize>, cols: &mut [f64]) {
        let cin = self.cin;
        let k = self.patch_len();
        for (n, r) in rows.enumerate() {
            let row = &mut cols[n * k..(n + 1) * k];
            self.for_each_tap(r, |tap, pos| {
                let dst = &mut row[tap * cin..(tap + 1) * cin];
                match pos {
                    Some(p) => dst.copy_from_slice(&x[p * cin..(p + 1) * cin]),
                    None => dst.fill(0.0),
                }
            });
        }
    }

    fn col2im(&self, cols: &[f64], rows: std::ops::Range<usize>, gx: &mut [f64]) {
        let cin = self.cin;
        let k = self.patch_len();
        for (n, r) in rows.enumerate() {
            let row = &cols[n * k..(n + 1) * k];
            self.for_each_tap(r, |tap, pos| {
                if let Some(p) = pos {
                    let src = &row[tap * cin..(tap + 1) * cin];
                    for (g, s) in gx[p * cin..(p + 1) * cin].iter_mut().zip(src) {
                        *g += s;
                    }
                }
            });
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: operand extents were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward pass. `x` is `input × cin`, `w` is `kernel × cin × cout`.
pub fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, cout) = (g.patch_len(), g.cout);
    let rows = g.out_positions();
    let mut out = vec![0.0; rows * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    if g.is_pointwise() {
        gemm(rows, k, cout, x, false, w, false, &mut out, 1.0);
        return out;
    }
    let block = g.rows_per_block();
    let mut cols = vec![0.0; block * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + block).min(rows);
        let nr = r1 - r0;
        g.im2col(x, r0..r1, &mut cols[..nr * k]);
        gemm(nr, k, cout, &cols, false, w, false, &mut out[r0 * cout..r1 * cout], 1.0);
        r0 = r1;
    }
    out
}

pub struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64], need_x: bool) -> ConvGrads {
    let (k, cout) = (g.patch_len(), g.cout);
    let rows = g.out_positions();
    let mut gw = vec![0.0; k * cout];
    let mut gb = vec![0.0; cout];
    for row in gout.chunks_exact(cout) {
        for (b, r) in gb.iter_mut().zip(row) {
            *b += r;
        }
    }
    let mut gx = need_x.then(|| vec![0.0; g.in_positions() * g.cin]);
    if g.is_pointwise() {
        gemm(k, rows, cout, x, true, gout, false, &mut gw, 0.0);
        if let Some(gx) = gx.as_mut() {
            gemm(rows, cout, k, gout, false, w, true, gx, 0.0);
        }
        return ConvGrads { x: gx, w: gw, bias: gb };
    }
    let block = g.rows_per_block();
    let mut cols = vec![0.0; block * k];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + block).min(rows);
        let nr = r1 - r0;
        let go = &gout[r0 * cout..r1 * cout];
        g.im2col(x, r0..r1, &mut cols[..nr * k]);
        gemm(k, nr, cout, &cols, true, go, false, &mut gw, 1.0);
        if let Some(gx) = gx.as_mut() {
            gemm(nr, cout, k, go, false, w, true, &mut cols, 0.0);
            g.col2im(&cols[..nr * k], r0..r1, gx);
        }
        r0 = r1;
    }
    ConvGrads { x: gx, w: gw, bias: gb }
}

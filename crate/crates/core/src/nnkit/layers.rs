//! Output heads built from the tape operators.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nnkit::conv::Padding;
use crate::nnkit::param::{ParamId, ParamStore};
use crate::nnkit::tape::{Tape, Var};

/// Channel widths of a ray-reduction head: halve until one channel is left.
/// `channel_plan(256)` is `[256, 128, 64, 32, 16, 8, 4, 2, 1]`.
pub fn channel_plan(in_channels: usize) -> Vec<usize> {
    let mut plan = vec![in_channels.max(1)];
    while *plan.last().unwrap() > 1 {
        plan.push(plan.last().unwrap() / 2);
    }
    plan
}

/// Stack of 1×1 convolutions with rectifiers between them, mapping an
/// `[H, W, N_z * C]` projection to an `[H, W, 1]` depth map.
pub fn ray_reduce_head(tape: &mut Tape, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("ray reduction needs at least one layer"));
    }
    let mut y = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let ws = tape.value(w).shape();
        if ws.len() != 4 || ws[0] != 1 || ws[1] != 1 {
            return Err(Error::shape(format!("ray reduction kernels must be [1,1,ci,co], got {ws:?}")));
        }
        y = tape.conv(y, w, Some(b), 1, Padding::Same)?;
        if i + 1 < layers.len() {
            y = tape.relu(y);
        }
    }
    if tape.value(y).channels() != 1 {
        return Err(Error::shape("ray reduction must end with one channel"));
    }
    Ok(y)
}

/// Occupancy probability from a `[D, H, W, C]` grid: 1×1×1 convolution to two
/// logits, softmax over them, and the second channel.
pub fn voxel_head(tape: &mut Tape, g: Var, w: Var, b: Var) -> Result<Var> {
    let ws = tape.value(w).shape();
    if ws.len() != 5 || ws[..3] != [1, 1, 1] || ws[4] != 2 {
        return Err(Error::shape(format!("voxel head kernel must be [1,1,1,c,2], got {ws:?}")));
    }
    let logits = tape.conv(g, w, Some(b), 1, Padding::Same)?;
    let p = tape.softmax_channels(logits);
    tape.select_channel(p, 1)
}

/// Parameters of a [`ray_reduce_head`].
#[derive(Clone, Debug)]
pub struct RayReduceParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl RayReduceParams {
    pub fn register(store: &mut ParamStore, prefix: &str, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let plan = channel_plan(in_channels);
        let layers = plan
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let w = store.add_he(format!("{prefix}.{i}.w"), &[1, 1, c[0], c[1]], c[0], rng);
                let b = store.add_filled(format!("{prefix}.{i}.b"), &[c[1]], 0.0);
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tensor::Tensor;

    #[test]
    fn plan_halves_to_one() {
        assert_eq!(channel_plan(256), vec![256, 128, 64, 32, 16, 8, 4, 2, 1]);
        assert_eq!(channel_plan(6), vec![6, 3, 1]);
        assert_eq!(channel_plan(1), vec![1]);
    }

    #[test]
    fn selector_weights_emit_the_plane_depth() {
        let (nz, cg, h, w) = (6usize, 2usize, 3usize, 4usize);
        let z: Vec<f64> = (0..nz).map(|k| 1.5 + 0.1 * k as f64).collect();
        let mut x = Vec::new();
        for _ in 0..h * w {
            for &zk in &z {
                x.extend(std::iter::repeat_n(zk, cg));
            }
        }
        let plan = channel_plan(nz * cg);
        for k in 0..nz {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![h, w, nz * cg], x.clone()).unwrap());
            let layers: Vec<(Var, Var)> = plan
                .windows(2)
                .enumerate()
                .map(|(i, c)| {
                    let mut wt = vec![0.0; c[0] * c[1]];
                    let src = if i == 0 { k * cg } else { 0 };
                    wt[src * c[1]] = 1.0;
                    (
                        tape.constant(Tensor::new(vec![1, 1, c[0], c[1]], wt).unwrap()),
                        tape.constant(Tensor::zeros(&[c[1]])),
                    )
                })
                .collect();
            let d = ray_reduce_head(&mut tape, xv, &layers).unwrap();
            assert!(tape.value(d).data().iter().all(|&v| v == z[k]));
        }
    }

    #[test]
    fn pixel_permutation_commutes() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = RayReduceParams::register(&mut store, "r", 8, &mut rng);
        let (h, w) = (2, 5);
        let data: Vec<f64> = (0..h * w * 8).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.3).collect();
        let perm: Vec<usize> = (0..h * w).map(|p| (p * 3 + 1) % (h * w)).collect();
        let mut permuted = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..dst * 8 + 8].copy_from_slice(&data[src * 8..src * 8 + 8]);
        }
        let run = |d: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![h, w, 8], d).unwrap());
            let layers = head.on_tape(&mut tape, &store);
            let y = ray_reduce_head(&mut tape, x, &layers).unwrap();
            tape.value(y).data().to_vec()
        };
        let (a, b) = (run(data), run(permuted));
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(b[dst], a[src]);
        }
    }

    #[test]
    fn voxel_head_probabilities() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::new(vec![1, 1, 5, 1], vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let p = voxel_head(&mut tape, g, w, b).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        // Logit difference 6x: probabilities strictly increase along the ladder.
        let w = tape.constant(Tensor::new(vec![1, 1, 1, 1, 2], vec![-3.0, 3.0]).unwrap());
        let p = voxel_head(&mut tape, g, w, b).unwrap();
        let p = tape.value(p).data();
        assert!(p.windows(2).all(|q| q[0] < q[1]));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p[4] > 0.9999);
    }
}

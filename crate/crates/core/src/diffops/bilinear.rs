use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Up to four raster samples and their bilinear weights. Samples outside the
/// raster are dropped, which is the zero-padding rule.
#[derive(Clone, Copy, Debug, Default)]
pub struct BilinearTaps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub len: usize,
}

impl BilinearTaps {
    pub fn new(height: usize, width: usize, u: f64, v: f64) -> Self {
        let mut taps = Self::default();
        if !(u.is_finite() && v.is_finite()) {
            return taps;
        }
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let corners = [
            (u0, v0, (1.0 - fu) * (1.0 - fv)),
            (u0 + 1.0, v0, fu * (1.0 - fv)),
            (u0, v0 + 1.0, (1.0 - fu) * fv),
            (u0 + 1.0, v0 + 1.0, fu * fv),
        ];
        for (cu, cv, w) in corners {
            if w == 0.0 || cu < 0.0 || cv < 0.0 || cu >= width as f64 || cv >= height as f64 {
                continue;
            }
            taps.index[taps.len] = cv as usize * width + cu as usize;
            taps.weight[taps.len] = w;
            taps.len += 1;
        }
        taps
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index[..self.len]
            .iter()
            .copied()
            .zip(self.weight[..self.len].iter().copied())
    }

    /// Accumulate the interpolated pixel of `data` (channel-last) into `out`.
    #[inline]
    pub fn gather(&self, data: &[f64], channels: usize, out: &mut [f64]) {
        for (idx, w) in self.iter() {
            let px = &data[idx * channels..(idx + 1) * channels];
            for (o, x) in out.iter_mut().zip(px) {
                *o += w * x;
            }
        }
    }

    /// Adjoint of [`gather`](Self::gather).
    #[inline]
    pub fn scatter(&self, upstream: &[f64], channels: usize, grad: &mut [f64]) {
        for (idx, w) in self.iter() {
            let px = &mut grad[idx * channels..(idx + 1) * channels];
            for (g, up) in px.iter_mut().zip(upstream) {
                *g += w * up;
            }
        }
    }
}

fn in_bounds(f: &FeatureMap, p: [f64; 2]) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (f.width - 1) as f64 && p[1] <= (f.height - 1) as f64
}

/// Bilinear interpolation at continuous `(u, v)` positions with zero padding.
///
/// Returns `N × C` values and a flag per point telling whether the point lies
/// fully inside the raster.
pub fn bilinear_sample(f: &FeatureMap, pts: &[[f64; 2]]) -> (Vec<f64>, Vec<bool>) {
    let c = f.channels;
    let mut values = vec![0.0; pts.len() * c];
    let mut valid = Vec::with_capacity(pts.len());
    for (p, out) in pts.iter().zip(values.chunks_exact_mut(c.max(1))) {
        BilinearTaps::new(f.height, f.width, p[0], p[1]).gather(&f.data, c, out);
        valid.push(in_bounds(f, *p));
    }
    (values, valid)
}

/// Gradient of `⟨bilinear_sample(F, pts), upstream⟩` with respect to `F`.
pub fn bilinear_sample_vjp(f: &FeatureMap, pts: &[[f64; 2]], upstream: &[f64]) -> Result<FeatureMap> {
    let c = f.channels;
    if upstream.len() != pts.len() * c {
        return Err(Error::shape(format!(
            "upstream has {} values, expected {} points x {c} channels",
            upstream.len(),
            pts.len()
        )));
    }
    let mut grad = FeatureMap::zeros(f.height, f.width, c);
    for (p, up) in pts.iter().zip(upstream.chunks_exact(c.max(1))) {
        BilinearTaps::new(f.height, f.width, p[0], p[1]).scatter(up, c, &mut grad.data);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_interpolates_to_constant() {
        let f = FeatureMap::filled(5, 7, 2, 3.0);
        let (vals, valid) = bilinear_sample(&f, &[[2.3, 1.7], [0.0, 0.0], [6.0, 4.0]]);
        assert!(vals.iter().all(|&x| (x - 3.0).abs() < 1e-15));
        assert!(valid.iter().all(|&b| b));
    }

    #[test]
    fn two_by_two_center_is_mean() {
        let f = FeatureMap::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (vals, valid) = bilinear_sample(&f, &[[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(vals, vec![1.5, 1.0, 2.0]);
        assert_eq!(valid, vec![true, true, true]);
    }

    #[test]
    fn outside_samples_are_zero_and_invalid() {
        let f = FeatureMap::filled(4, 4, 1, 5.0);
        let (vals, valid) = bilinear_sample(&f, &[[-1.0, -1.0], [-0.5, 1.0], [3.5, 3.0]]);
        assert_eq!(vals[0], 0.0);
        assert!(!valid[0]);
        // Half the footprint is padding.
        assert_eq!(vals[1], 2.5);
        assert!(!valid[1]);
        assert_eq!(vals[2], 2.5);
        assert!(!valid[2]);
    }

    #[test]
    fn vjp_of_zero_upstream_is_zero() {
        let f = FeatureMap::filled(3, 3, 2, 1.0);
        let pts = [[0.4, 1.2], [2.0, 0.5]];
        let g = bilinear_sample_vjp(&f, &pts, &[0.0; 4]).unwrap();
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vjp_at_integer_point_hits_one_sample() {
        let f = FeatureMap::zeros(4, 5, 1);
        let g = bilinear_sample_vjp(&f, &[[3.0, 2.0]], &[1.0]).unwrap();
        for v in 0..4 {
            for u in 0..5 {
                let want = if (v, u) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(g.get(v, u, 0), want);
            }
        }
    }

    #[test]
    fn vjp_matches_dot_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, c) = (6, 9, 3);
        let f = FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pts: Vec<[f64; 2]> = (0..40)
            .map(|_| [rng.random_range(-1.5..9.5), rng.random_range(-1.5..6.5)])
            .collect();
        let up: Vec<f64> = (0..pts.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (vals, _) = bilinear_sample(&f, &pts);
        let g = bilinear_sample_vjp(&f, &pts, &up).unwrap();
        let lhs: f64 = vals.iter().zip(&up).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.data.iter().zip(&f.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

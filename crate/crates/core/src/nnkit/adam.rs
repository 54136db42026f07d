use crate::nnkit::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        adam_step(store, &mut self.m, &mut self.v, &self.config, self.t);
    }
}

/// One Adam update at step `t >= 1` using the gradients held by `store`.
pub fn adam_step(store: &mut ParamStore, m: &mut [Vec<f64>], v: &mut [Vec<f64>], cfg: &AdamConfig, t: u64) {
    assert!(t >= 1, "adam step index starts at 1");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for ((p, m), v) in store.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
        let grad = &p.grad;
        for (((x, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.get(crate::nnkit::ParamId(0)).value.clone();
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s);
        adam.step(&mut s);
        assert_eq!(s.get(crate::nnkit::ParamId(0)).value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        for p in s.iter_mut() {
            p.grad = vec![0.3, -7.0, 1e-3];
        }
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s);
        let after = s.get(crate::nnkit::ParamId(0)).value.data().to_vec();
        let delta = [after[0] - 1.0, after[1] + 2.0, after[2] - 0.5];
        for (d, sign) in delta.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((d - sign * 1e-3).abs() < 1e-3 * 1e-4, "{d}");
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = store();
            let mut adam = Adam::new(&s, AdamConfig::default());
            for k in 0..5 {
                for p in s.iter_mut() {
                    p.grad = p.value.data().iter().map(|x| x * 0.5 + k as f64).collect();
                }
                adam.step(&mut s);
            }
            s.get(crate::nnkit::ParamId(0)).value.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

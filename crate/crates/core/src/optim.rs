//! Adam.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::params::ParamSet;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1: f64 = 1.0 - b1.powi(t);
        let c2: f64 = 1.0 - b2.powi(t);
        let lr = T::lit(self.cfg.lr * c2.sqrt() / c1);
        let eps = T::lit(self.cfg.eps * c2.sqrt());
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (alloc::vec![T::zero(); g.len()], alloc::vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + ob1 * gi;
                *vi = b2t * *vi + ob2 * gi * gi;
                *w -= lr * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[2], alloc::vec![1.0f64, -1.0]));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::from_vec(&[2], alloc::vec![0.3, -7.0]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.01));
        opt.step(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(&[1], alloc::vec![3.0f64]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            let x = p.get("x").unwrap().data()[0];
            let mut g = ParamSet::new();
            g.insert("x", Tensor::from_vec(&[1], alloc::vec![2.0 * (x - 1.0)]));
            opt.step(&mut p, &g);
        }
        assert!((p.get("x").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}

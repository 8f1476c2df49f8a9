//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use crate::nn::{Grads, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled penalty: each step also subtracts `lr * weight_decay * w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ModelParams<T>) -> Self {
        let zeros = params.zeros_like().0;
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::lit(1.0 - b1.powi(self.step));
        let bc2 = T::lit(1.0 - b2.powi(self.step));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let one = T::one();
        let lr = T::lit(lr);
        let eps = T::lit(self.cfg.eps);
        let wd = T::lit(self.cfg.weight_decay);
        for (((t, g), m), v) in params.tensors.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..t.data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = &mut t.data[i];
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}

/// Cosine decay from `max` at step 0 to `min` at `total` steps.
pub fn cosine_lr(max: f64, min: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return max;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NamedTensor;

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 99, 100) - 1e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            let lr = cosine_lr(1e-3, 1e-5, s, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ModelParams {
            tensors: vec![NamedTensor {
                name: "x".into(),
                shape: vec![2],
                data: vec![3.0f64, -2.0],
            }],
            seed: 0,
            fingerprint: 0,
        };
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..2000 {
            let g = Grads(vec![p.tensors[0].data.iter().map(|x| 2.0 * (x - 1.0)).collect()]);
            opt.step(&mut p, &g, 0.01);
        }
        for x in &p.tensors[0].data {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = ModelParams {
            tensors: vec![NamedTensor {
                name: "x".into(),
                shape: vec![1],
                data: vec![1.0f64],
            }],
            seed: 0,
            fingerprint: 0,
        };
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &Grads(vec![vec![0.0]]), 0.5);
        assert!((p.tensors[0].data[0] - 0.95).abs() < 1e-12);
    }
}

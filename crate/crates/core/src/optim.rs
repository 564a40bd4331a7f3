//! Adam, cosine learning-rate decay and global-norm gradient clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Parameters without a gradient are left
/// untouched and their moments do not decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
    }
}

/// `lr_init * 0.5 * (1 + cos(pi * step / total))`, floored at `lr_init * 1e-2`.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    let lr = lr_init * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac));
    lr.max(lr_init * 1e-2)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::InitScheme;
    use alloc::vec;

    #[test]
    fn adam_matches_hand_computed_updates() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", &[2], InitScheme::Zeros);
        store.get_mut(id).data_mut().copy_from_slice(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let gs = [[0.5, -1.0], [0.2, 0.3]];
        // oracle, written out independently
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let mut theta = [1.0f64, -2.0];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        for (t, g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
            let grads = ParamGrads(vec![Some(Tensor::new(&[2], g.to_vec()).unwrap())]);
            adam.step(&mut store, &grads, lr);
            for i in 0..2 {
                assert!((store.get(id).data()[i] - theta[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn missing_gradients_leave_parameters_alone() {
        let mut store = ParamStore::new(0);
        let a = store.add("a", &[3], InitScheme::Ones);
        let b = store.add("b", &[3], InitScheme::Ones);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = ParamGrads(vec![None, Some(Tensor::full(&[3], 1.0))]);
        adam.step(&mut store, &grads, 0.01);
        assert_eq!(store.get(a), &Tensor::full(&[3], 1.0));
        assert!(store.get(b).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 2e-4), 2e-4);
        assert!((cosine_lr(50, 100, 2e-4) - 1e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(100, 100, 2e-4), 2e-4 * 1e-2);
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1.0);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = ParamGrads(vec![Some(Tensor::new(&[2], vec![3.0, 4.0]).unwrap()), None]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = ParamGrads(vec![Some(Tensor::new(&[1], vec![0.5]).unwrap())]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.get(crate::nn::ParamId(0)).unwrap().data(), &[0.5]);
    }
}

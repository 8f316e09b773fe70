//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-12,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros_like(t: &Tensor<T>) -> Self {
        Moments {
            m: Tensor::zeros(t.shape()),
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// One AdamW update of `param` at 1-based step `step`.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    moments: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let eps = T::lit(cfg.eps);
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * weight_decay);
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] = p[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for a whole parameter store.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable entry that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(grad) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !entry.trainable {
                continue;
            }
            let wd = if entry.kind.decays() {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let moments = self.moments[i].get_or_insert_with(|| Moments::zeros_like(&entry.value));
            adamw_step(&mut entry.value, grad, moments, self.step, lr, &self.cfg, wd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&mut p, &g, &mut mom, 1, 1e-3, &AdamWConfig::default(), 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        // m = (1-b1) g, v = (1-b2) g^2; bias correction restores g and g^2,
        // so the step is -lr * g / (|g| + eps).
        let cfg = AdamWConfig {
            eps: 1e-8,
            ..AdamWConfig::default()
        };
        let mut p = Tensor::<f64>::scalar(0.3);
        let g = Tensor::scalar(-0.25);
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&mut p, &g, &mut mom, 1, 0.01, &cfg, 0.0);
        let expected = 0.3 - 0.01 * (-0.25) / (0.25 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![2.0, -4.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&mut p, &g, &mut mom, 1, 0.1, &AdamWConfig::default(), 0.5);
        assert!((p.data()[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p.data()[1] + 4.0 * 0.95).abs() < 1e-15);
    }
}

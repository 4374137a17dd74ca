//! Adaptive-moment optimizer with decoupled weight decay and per-group learning rates.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `lr` maps a parameter group to its learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: impl Fn(&str) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        for (id, g) in grads {
            if !store.contains(*id) || !store.entry(*id).trainable {
                continue;
            }
            let rate = lr(&store.entry(*id).group);
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let step_size = T::lit(rate / bc1);
            let decay = T::lit(rate * self.weight_decay);
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(self.eps);
            let p = store.entry_mut(*id).value.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] - step_size * m[i] / denom - decay * p[i];
            }
        }
    }

    /// Moment buffers keyed by parameter, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[T], &[T])> {
        self.moments.iter().map(|(id, (m, v))| (*id, m.as_slice(), v.as_slice()))
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(id, m, v)| (id, (m, v))).collect();
    }

    pub fn forget(&mut self, id: ParamId) {
        self.moments.remove(&id);
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sum_sq().as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-12));
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

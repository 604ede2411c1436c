//! Adam optimiser.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimiser without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        // Fold the bias corrections into the step size and epsilon.
        let step_size = T::from_f64(self.cfg.learning_rate / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.cfg.eps);
        for (id, g) in grads {
            let entry = store.get_mut(*id);
            if !entry.requires_grad() {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let p = entry.value_mut().data_mut();
            assert_eq!(p.len(), n, "gradient size mismatch for {}", id.index());
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr·sign(g) (up to eps).
        let mut store = ParamStore::<f64>::new();
        let id = store.weight("w", Tensor::new(vec![2], vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut store, &[(id, Tensor::new(vec![2], vec![3.0, -0.5]))]);
        let p = store.value(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f64>::new();
        let id = store.weight("backbone.w", Tensor::new(vec![1], vec![1.0]));
        store.set_trainable_prefix("backbone.", false);
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut store, &[(id, Tensor::new(vec![1], vec![1.0]))]);
        assert_eq!(store.value(id).data(), &[1.0]);
    }
}

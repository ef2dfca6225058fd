//! Bias-corrected Adam.

use super::params::ParamSet;
use super::tensor::{NumError, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
pub struct AdamState<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        let v = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        AdamState { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adjusts the learning rate between steps (schedules live in the
    /// training loops).
    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.config.learning_rate = learning_rate;
    }

    /// One update over every parameter in the set. Gradients must be
    /// populated; they are zeroed after the update.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<(), NumError> {
        self.step += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let eps = T::from_f64(self.config.epsilon);
        let bc1 = T::from_f64(1.0 - self.config.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.config.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.config.learning_rate);

        for (index, (_, tensor)) in params.iter_mut().enumerate() {
            let n = tensor.len();
            {
                let grad = tensor.grad().ok_or(NumError::MissingGrad { index })?;
                let m = &mut self.m[index];
                let v = &mut self.v[index];
                debug_assert_eq!(grad.len(), n);
                for i in 0..n {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                }
            }
            let data = tensor.data_mut();
            for i in 0..n {
                let mhat = self.m[index][i] / bc1;
                let vhat = self.v[index][i] / bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::tensor::Tensor;

    fn single_param(value: f64) -> (ParamSet<f64>, crate::num::params::ParamHandle) {
        let mut set = ParamSet::new();
        let h = set.add("x", Tensor::scalar(value));
        (set, h)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let (mut set, h) = single_param(1.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &set);
        adam.step(&mut set).unwrap();
        assert_eq!(set.tensor(h).data()[0], 1.5);
    }

    #[test]
    fn first_step_with_unit_grad_moves_by_lr() {
        // Hand evaluation of the recurrence at t=1, g=1:
        //   m1 = 0.1, v1 = 0.001, mhat = 1, vhat = 1
        //   delta = lr * 1 / (1 + eps) ~= lr
        let (mut set, h) = single_param(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &set);
        set.tensor_mut(h).accumulate_grad(&[1.0]);
        adam.step(&mut set).unwrap();
        let moved = -set.tensor(h).data()[0];
        assert!((moved - 0.1).abs() < 1e-8, "moved {moved}");
        // Grads are cleared by the step.
        assert_eq!(set.tensor(h).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let (mut set, h) = single_param(1.0);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.05), &set);
            for step in 0..10 {
                let g = 0.3 + 0.1 * step as f64;
                set.tensor_mut(h).accumulate_grad(&[g]);
                adam.step(&mut set).unwrap();
            }
            set.tensor(h).data()[0]
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

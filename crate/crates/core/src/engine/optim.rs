//! Adam with bias correction and the cosine annealing learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Tensor};
use crate::scalar::Scalar;

/// Adam hyperparameters shared by every tracked tensor of one optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 5e-5,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        assert!(
            (0.0..1.0).contains(&config.beta1) && (0.0..1.0).contains(&config.beta2),
            "Adam betas must lie in [0, 1)"
        );
        Self {
            step_count: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            config,
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<(), EngineError> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(EngineError::InvalidArgument(format!(
                "adam shapes differ: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        if !(lr > T::zero()) {
            return Err(EngineError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(index) = grad.data().iter().position(|g| !g.is_finite()) {
            return Err(EngineError::NonFiniteGradient { index });
        }
        self.step_count += 1;
        let b1 = T::of(self.config.beta1);
        let b2 = T::of(self.config.beta2);
        let eps = T::of(self.config.epsilon);
        let t = self.step_count as i32;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// `lr(t) = lr_min + ½(lr0 − lr_min)(1 + cos(πt/T))`, clamped to `lr_min` past `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, lr_min: f64, total_steps: u64) -> Self {
        Self {
            lr0,
            lr_min,
            total_steps,
        }
    }

    pub fn lr(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.lr_min;
        }
        let frac = t as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::ParamRefsMut;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    name: String,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer state: first/second moments per learnable parameter and the step count.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every learnable parameter at learning rate `lr`:
    ///
    /// ```text
    /// w ← w − lr·wd·w
    /// m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²
    /// w ← w − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + ε)
    /// ```
    pub fn step_with_lr(&mut self, params: &mut ParamRefsMut<'_, T>, lr: f64) -> Result<()> {
        let learnable: Vec<_> = params.iter_mut().filter(|(_, p)| p.is_learnable()).collect();
        if self.moments.is_empty() {
            self.moments = learnable
                .iter()
                .map(|(n, p)| Moments {
                    name: n.clone(),
                    m: Tensor::zeros(p.value.shape()),
                    v: Tensor::zeros(p.value.shape()),
                })
                .collect();
        } else if self.moments.len() != learnable.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                learnable.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * c.weight_decay);

        for ((name, p), mom) in learnable.into_iter().zip(&mut self.moments) {
            if *name != mom.name || p.value.shape() != mom.m.shape() {
                return Err(Error::config(format!(
                    "optimizer state for '{}' does not match parameter '{name}'",
                    mom.name
                )));
            }
            let grads = p.grad.data();
            let values = p.value.data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] * decay - lr_t * m_hat / (Float::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamRefsMut<'_, T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }
}

/// `base · ½(1 + cos(π·step/total))`, clamped to `step ≤ total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

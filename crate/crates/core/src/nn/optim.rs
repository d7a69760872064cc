//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Completed (non-skipped) updates; drives bias correction.
    pub step: u64,
    /// Updates rejected because a gradient was non-finite.
    pub skipped: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            skipped: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One update. A non-finite gradient leaves parameters and moments
    /// untouched, bumps `skipped` and returns `NonFiniteGradient`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer parameter count changed".into()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::ShapeMismatch("gradient shape differs from parameter".into()));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            self.skipped += 1;
            return Err(Error::NonFiniteGradient);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mn = c.beta1 * m.as_f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *w = T::from_f64(w.as_f64() * decay - c.lr * update);
            }
        }
        Ok(())
    }
}

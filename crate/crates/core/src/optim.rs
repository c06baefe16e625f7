//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled when their global L2 norm exceeds this;
    /// `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    m: Vec<S>,
    v: Vec<S>,
    decay: Vec<bool>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, config: AdamWConfig) -> Self {
        let mut decay = vec![false; params.len()];
        for (i, info) in params.infos().iter().enumerate() {
            let d = params.decays(i);
            decay[info.range()].iter_mut().for_each(|x| *x = d);
        }
        Self { config, m: params.zeros_like(), v: params.zeros_like(), decay, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` and returns the gradient
    /// norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[S], lr: f64) -> f64 {
        assert_eq!(grads.len(), params.data.len(), "gradient length mismatch");
        let c = self.config;
        let norm = grads.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step_size = S::from_f64_lossy(lr / bc1);
        let inv_bc2 = S::from_f64_lossy(1.0 / bc2);
        let eps = S::from_f64_lossy(c.eps);
        let clip = S::from_f64_lossy(clip);
        let shrink = S::from_f64_lossy(1.0 - lr * c.weight_decay);
        for i in 0..grads.len() {
            let g = grads[i] * clip;
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
            let w = &mut params.data[i];
            if self.decay[i] {
                *w *= shrink;
            }
            *w -= step_size * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
        norm
    }
}

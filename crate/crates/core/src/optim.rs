//! Adam with decoupled weight decay and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::nn::Scalar;

/// Piecewise-constant schedule: the base rate is multiplied by `factor` once
/// for every decay step already passed. Steps are counted from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_steps: Vec<u64>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn full_scale() -> Self {
        Self {
            initial: 4e-5,
            decay_steps: vec![5_000, 50_000, 90_000],
            factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(format!("learning rate must be positive, got {}", self.initial));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(format!("decay factor must lie in (0, 1], got {}", self.factor));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err("decay steps must be strictly increasing".into());
        }
        Ok(())
    }

    /// Learning rate in effect at 1-based training step `step`.
    pub fn rate(&self, step: u64) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&d| step > d).count() as i32;
        self.initial * self.factor.powi(passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// `θ ← θ(1 − lr·λ) − lr · m̂ / (√v̂ + ε)`
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::of(1.0 - b1.powi(self.t));
        let bc2 = T::of(1.0 - b2.powi(self.t));
        let decay = T::of(1.0 - lr * self.cfg.weight_decay);
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (lr, eps) = (T::of(lr), T::of(self.cfg.eps));
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

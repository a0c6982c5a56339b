use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    rejected: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zeros = || {
            net.layers().iter().flat_map(|l| [vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]]).collect()
        };
        Self { config, step: 0, m: zeros(), v: zeros(), rejected: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates rejected because the gradient was not finite.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Applies one bias-corrected Adam update (descending `grads`).
    /// Returns `false` and leaves everything untouched if a gradient is not finite.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> bool {
        if !grads.is_finite() {
            self.rejected += 1;
            return false;
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bias1 = T::one() - T::of(c.beta1.powi(self.step as i32));
        let bias2 = T::one() - T::of(c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);
        for (((p, g), m), v) in net.param_slices_mut().zip(grads.slices()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        true
    }
}

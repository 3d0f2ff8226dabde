//! Nadam: Adam with a Nesterov look-ahead on the first moment.

use serde::{Deserialize, Serialize};

use super::{Param, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Nadam<T> {
    pub config: NadamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Nadam<T> {
    pub fn new(config: NadamConfig) -> Self {
        Nadam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `params`. Moment
    /// buffers are matched to parameters by position.
    ///
    /// `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`,
    /// `p -= lr * (b1 * m_hat + (1 - b1) * g / (1 - b1^t)) / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad.len() != p.value.len() {
                return Err(Error::Shape(format!("parameter {i}: gradient length mismatch")));
            }
            if let Some(bad) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} (element {bad}) is not finite"
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Shape("optimizer state does not match the parameter set".into()));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let m_corr = T::of(1.0 - c.beta1.powi(t));
        let v_corr = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / m_corr;
                let v_hat = v[i] / v_corr;
                let look_ahead = b1 * m_hat + (one - b1) * g / m_corr;
                p.value[i] -= lr * look_ahead / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

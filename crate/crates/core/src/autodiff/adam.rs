use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("adam hyper-parameters out of range: {self:?}")))
        }
    }
}

/// Moment estimates for one group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let first_moment: Vec<Vec<f64>> = params.into_iter().map(|p| vec![0.0; p.value.len()]).collect();
        let second_moment = first_moment.clone();
        AdamState {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one bias-corrected update and zeroes the gradients.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, {} given",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.value.len() != m.len() || p.grad.len() != m.len() {
                return Err(Error::invalid(format!(
                    "parameter of length {} does not match optimizer slot of length {}",
                    p.value.len(),
                    m.len()
                )));
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);

        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Parameter { value, grad } = &mut **p;
            for (((w, g), mi), vi) in value.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}

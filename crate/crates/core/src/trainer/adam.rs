use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerState;
use crate::error::{Error, Result};
use crate::network::{FeatureExtractor, Gradients, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new<E: FeatureExtractor>(config: AdamConfig, model: &ModelState<E>) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn from_state(config: AdamConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn update<E: FeatureExtractor>(&mut self, model: &mut ModelState<E>, grads: &Gradients<E>, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let params = model.tensors_mut();
        let g = grads.tensors();
        for (((p, g), m), v) in params.into_iter().zip(g).zip(&mut self.state.m).zip(&mut self.state.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

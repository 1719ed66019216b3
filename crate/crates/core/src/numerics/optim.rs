use serde::{Deserialize, Serialize};

use super::ParamStore;
#[cfg(test)]
use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::invalid("weight_decay must lie in [0, 1)"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
///
/// Per trainable element with gradient `g` at step `t`:
///
/// ```text
/// w ← w·(1 − lr·λ)
/// m ← β1·m + (1 − β1)·g
/// v ← β2·v + (1 − β2)·g²
/// w ← w − lr · (m / (1 − β1^t)) / (sqrt(v / (1 − β2^t)) + ε)
/// ```
///
/// Moments are kept in `f64`; weights are rounded back to `f32`.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Applies one update to every trainable parameter. `step_index` starts at 1.
    pub fn step(&mut self, params: &mut ParamStore, step_index: u64) -> Result<()> {
        if step_index == 0 {
            return Err(Error::invalid("step_index starts at 1"));
        }
        let c = self.config;
        let t = step_index as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (slot, p) in self.moments.iter_mut().zip(params.iter_mut()) {
            let Some(span) = p.trainable_span() else {
                continue;
            };
            let Some(grad) = p.gradient.as_ref() else {
                return Err(Error::IllegalState(format!(
                    "parameter `{}` has no gradient",
                    p.name
                )));
            };
            if grad.shape() != p.value.shape() {
                return Err(Error::IllegalState(format!(
                    "gradient shape {:?} does not match `{}` {:?}",
                    grad.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            let (m, v) = match slot {
                Some((m, _)) if m.len() == n => slot.as_mut().unwrap(),
                _ => slot.insert((vec![0.0; n], vec![0.0; n])),
            };
            let g = grad.data();
            let w = p.value.data_mut();
            for j in span {
                let gj = g[j] as f64;
                let mut wj = w[j] as f64;
                wj *= 1.0 - c.learning_rate * c.weight_decay;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                wj -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                w[j] = wj as f32;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|(_, p)| p.gradient.as_ref())
        .flat_map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = (max_norm / total) as f32;
        for p in params.iter_mut() {
            if let Some(g) = p.gradient.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Tensors, DECAYED};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, weight_decay: 0.0, eps: 1e-8, max_grad_norm: 1.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("moment decays must lie in [0, 1): {self:?}")));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!("invalid AdamW hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Tensors,
    pub v: Tensors,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, like: &Tensors) -> Self {
        let mut m = like.clone();
        m.map_inplace(|x| *x = 0.0);
        OptimizerState { config, v: m.clone(), m, step: 0 }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Tensors, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.map_inplace(|g| *g *= c);
    }
    norm
}

/// One decoupled-weight-decay Adam step. Decay applies to the attention and
/// unembedding matrices only.
pub fn adamw_step(params: &mut Tensors, grads: &Tensors, state: &mut OptimizerState, lr: f64) {
    let AdamWConfig { beta1, beta2, weight_decay, eps, .. } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powf(state.step as f64);
    let bc2 = 1.0 - beta2.powf(state.step as f64);
    let tensors = params.slices_mut().into_iter().zip(grads.slices());
    let moments = state.m.slices_mut().into_iter().zip(state.v.slices_mut());
    for (i, ((p, g), (m, v))) in tensors.zip(moments).enumerate() {
        let decay = if DECAYED[i] { lr * weight_decay } else { 0.0 };
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= decay * p[j] + lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr_extractor: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_extractor: 1e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Extractor => self.lr_extractor,
            ParamGroup::Other => self.lr_other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr_extractor >= 0.0) || !(self.lr_other >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `grads`. Nothing is changed
    /// if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let p = params.get(*id);
            if p.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{}` is {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{}`", p.name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (id, g) in grads {
            let lr = c.lr(params.get(*id).group);
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let theta = params.value_mut(*id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + c.eps) + lr * c.weight_decay * theta[i];
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

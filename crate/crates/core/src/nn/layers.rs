use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` applied to each row of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config(format!("linear `{name}` needs positive dims, got {in_dim}→{out_dim}")));
        }
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, out_dim, in_dim), group)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group)?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Normalization over the last axis with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamGroup::Other)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamGroup::Other)?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), dim, hidden, ParamGroup::Other)?,
            output: Linear::new(store, rng, &format!("{name}.output"), hidden, dim, ParamGroup::Other)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// A stack of linear layers with ReLU between them and no final activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config(format!("mlp `{name}` needs at least two dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.l{i}"), w[0], w[1], ParamGroup::Other))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.zero(store);
        }
    }
}

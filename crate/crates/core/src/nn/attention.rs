use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};

/// Multi-head scaled dot-product attention with input and output projections.
///
/// Positional encodings are added to the query and key inputs before their
/// projections; values never see them.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Result of one attention call. `weights` is the fused attention node; pass
/// it to [`Graph::attention_probs`] to read the per-head softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model dim {dim} is not divisible by {heads} attention heads"
            )));
        }
        let mut proj = |suffix: &str| Linear::new(store, rng, &format!("{name}.{suffix}"), dim, dim, ParamGroup::Other);
        Ok(MultiHeadAttention {
            heads,
            dim,
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        pe_q: Option<Var>,
        pe_k: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, q, k, v, pe_q, pe_k)?.output)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        pe_q: Option<Var>,
        pe_k: Option<Var>,
    ) -> Result<Attended> {
        let q_in = match pe_q {
            Some(pe) => g.add(q, pe)?,
            None => q,
        };
        let k_in = match pe_k {
            Some(pe) => g.add(k, pe)?,
            None => k,
        };
        let qp = self.query.forward(g, q_in)?;
        let kp = self.key.forward(g, k_in)?;
        let vp = self.value.forward(g, v)?;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let weights = g.attention(qp, kp, vp, self.heads, scale)?;
        let output = self.output.forward(g, weights)?;
        Ok(Attended { output, weights })
    }
}

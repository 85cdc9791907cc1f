use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::attention::Attended;
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;

/// Residual attention sublayer followed by a residual feed-forward sublayer.
///
/// Normalization is applied to each sublayer's input (pre-norm), so the
/// residual stream itself is never rescaled: with the value projection,
/// output bias and final FFN layer zeroed the block is an exact identity.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_query: LayerNorm,
    /// Separate normalization for the key/value stream of cross-attention.
    pub norm_memory: Option<LayerNorm>,
    pub attention: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl AttentionBlock {
    /// Self-attention block (SAB).
    pub fn new_self<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Self::build(store, rng, name, dim, heads, ffn_hidden, false)
    }

    /// Cross-attention block (CAB): queries from one stream, keys and values from another.
    pub fn new_cross<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Self::build(store, rng, name, dim, heads, ffn_hidden, true)
    }

    fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        cross: bool,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        let norm_query = LayerNorm::new(store, &format!("{name}.norm_query"), dim)?;
        let norm_memory = if cross {
            Some(LayerNorm::new(store, &format!("{name}.norm_memory"), dim)?)
        } else {
            None
        };
        let norm_ffn = LayerNorm::new(store, &format!("{name}.norm_ffn"), dim)?;
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_hidden)?;
        Ok(AttentionBlock {
            norm_query,
            norm_memory,
            attention,
            norm_ffn,
            ffn,
        })
    }

    pub fn is_cross(&self) -> bool {
        self.norm_memory.is_some()
    }

    pub fn forward_self(&self, g: &mut Graph, x: Var, pe: Option<Var>) -> Result<Var> {
        Ok(self.forward_self_traced(g, x, pe)?.output)
    }

    pub fn forward_self_traced(&self, g: &mut Graph, x: Var, pe: Option<Var>) -> Result<Attended> {
        if self.is_cross() {
            return Err(Error::config("cross-attention block used as self-attention"));
        }
        let xn = self.norm_query.forward(g, x)?;
        let att = self.attention.forward_traced(g, xn, xn, xn, pe, pe)?;
        self.finish(g, x, att)
    }

    pub fn forward_cross(&self, g: &mut Graph, x: Var, y: Var, pe_x: Option<Var>, pe_y: Option<Var>) -> Result<Var> {
        Ok(self.forward_cross_traced(g, x, y, pe_x, pe_y)?.output)
    }

    pub fn forward_cross_traced(
        &self,
        g: &mut Graph,
        x: Var,
        y: Var,
        pe_x: Option<Var>,
        pe_y: Option<Var>,
    ) -> Result<Attended> {
        let norm_memory = self
            .norm_memory
            .as_ref()
            .ok_or_else(|| Error::config("self-attention block used as cross-attention"))?;
        let xn = self.norm_query.forward(g, x)?;
        let yn = norm_memory.forward(g, y)?;
        let att = self.attention.forward_traced(g, xn, yn, yn, pe_x, pe_y)?;
        self.finish(g, x, att)
    }

    fn finish(&self, g: &mut Graph, x: Var, att: Attended) -> Result<Attended> {
        let x = g.add(x, att.output)?;
        let xn = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, xn)?;
        let output = g.add(x, f)?;
        Ok(Attended {
            output,
            weights: att.weights,
        })
    }

    /// Zeroes the value projection, the attention output bias and the final
    /// FFN layer, which turns the block into the identity on its query stream.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.attention.value.zero(store);
        store.value_mut(self.attention.output.bias).data_mut().fill(0.0);
        self.ffn.output.zero(store);
    }
}

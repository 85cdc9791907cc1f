//! Building blocks for the fusion network and the temporal attention module.
//!
//! Every block stores [`ParamId`](crate::params::ParamId)s into a shared
//! [`ParamStore`](crate::params::ParamStore) and builds its forward pass on a
//! [`Graph`](crate::autodiff::Graph).

mod attention;
mod blocks;
mod layers;
mod posenc;

pub use attention::{Attended, MultiHeadAttention};
pub use blocks::AttentionBlock;
pub use layers::{FeedForward, LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use posenc::{sinusoidal_pe_1d, sinusoidal_pe_2d, PositionalEncoding, PositionalKind};

//! Transformer building blocks on top of [`crate::tensor`].
//!
//! Layers own no tensors. They hold [`ParamId`]s into a [`Params`] store,
//! which is placed on a fresh [`Graph`](crate::tensor::Graph) for every
//! forward pass via [`Params::bind`].

mod attention;
mod layers;
mod params;

pub use attention::{Attended, AttentionConfig, DecoderBlock, EncoderBlock, MultiHeadAttention};
pub use layers::{add_positions, add_row_bias, sinusoidal, FeedForward, LayerNorm, Linear};
pub use params::{Bound, Init, ParamId, Params};

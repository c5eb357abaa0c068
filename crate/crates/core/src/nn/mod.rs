//! Minimal differentiable kernel: each layer exposes an explicit forward
//! pass returning a cache and a backward pass consuming it.

pub mod attention;
pub mod block;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod sample;
pub mod tensor;

pub use attention::{AttnMask, KvCache, MultiHeadAttention};
pub use block::{Block, Norm};
pub use layers::{
    embedding_lookup, sinusoidal_positions, AdaptiveLayerNorm, Embedding, FeedForward, LayerNorm,
    Linear,
};
pub use params::{Grads, ParamId, ParamStore};
pub use sample::softmax_sample;
pub use tensor::{Scalar, Tensor2};

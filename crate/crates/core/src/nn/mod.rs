//! Minimal neural-network toolkit: tensors, a differentiable tape, layers and Adam.

mod graph;
mod layers;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{Conv2d, ConvTower, EncoderBlock, FMap, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use params::{Adam, Init, ParamGrads, ParamId, ParamSet};
pub use tensor::Tensor;

//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Covers exactly what concept bottleneck models need: linear layers, 3×3
//! convolutions, leaky-ReLU/ReLU/sigmoid, batch normalization, column
//! slicing and mixing, masked soft-target BCE, weighted softmax
//! cross-entropy, and Adam.

pub mod checkpoint;
mod error;
mod graph;
pub mod linalg;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{
    sigmoid, BatchStats, ConvSpec, Gradients, Graph, Padding, Var, BN_EPS, BN_MOMENTUM,
    LEAKY_SLOPE, PROB_CLAMP,
};
pub use optim::Adam;
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

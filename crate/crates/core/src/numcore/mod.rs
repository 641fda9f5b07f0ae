//! Dense `f64` tensors, a reverse-mode tape, and the layers built on it.

mod graph;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sample;
pub mod scalar;

pub use graph::{inverse_sigmoid, log_sigmoid, sigmoid, ConvSpec, Graph, LevelShape, Var, INV_SIGMOID_EPS};
pub use nn::{linear, LayerNorm, Linear, Mlp};
pub use optim::AdamW;
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{Dual5, Real};
pub use tensor::Tensor;

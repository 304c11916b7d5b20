//! Dense tensors, a reverse-mode tape, and Adam.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{clip_global_norm, AdamConfig, ParamStore, DEFAULT_LR};
pub use tensor::Tensor;

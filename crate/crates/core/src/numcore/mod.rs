//! Dense tensors, reverse-mode differentiation, AdamW, and checkpoints.

pub mod checkpoint;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Axis, Graph, LeafGrads, Var};
pub(crate) use graph::sigmoid;
pub use optim::{warmup_cosine, AdamW, AdamWConfig};
pub use params::{GradStore, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

//! Dense tensors, a reverse-mode gradient tape, AdamW and checkpoints.

pub mod adamw;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod rng;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::Checkpoint;
pub use graph::{sigmoid, silu, softplus, Graph, Var};
pub use params::{evaluate_with_gradients, Gradients, Param, ParamStore};
pub use tensor::Tensor;

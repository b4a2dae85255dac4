//! Small f64 reverse-mode autodiff used by the model and trainers.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{AttnSpec, Graph, Var};
pub use optim::{AdamConfig, AdamW};
pub use params::{Grads, ParamStore};
pub use tensor::Tensor;

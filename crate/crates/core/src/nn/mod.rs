//! Minimal reverse-mode autodiff over `f64` tensors.

mod ctx;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use ctx::{Ctx, WeightInit};
pub use graph::{Gradients, Graph, Var};
pub use params::{Initializer, ParamStore};
pub use tensor::Tensor;

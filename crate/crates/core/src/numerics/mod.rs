//! Numerical substrate: tensors, reverse-mode differentiation, AdamW and
//! checkpoint persistence. Everything runs in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{prefixed, Gradients, Graph, Parameterized, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{ParamId, Tensor};

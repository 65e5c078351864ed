//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! Every learnable component in the crate is assembled from the ops on
//! [`Graph`]. Inference-only paths may call the [`kernels`] directly.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Node, Var};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tensor::Tensor;

//! Tensor kernels, a reverse-mode tape and parameter storage.

pub mod graph;
pub mod kernels;
pub mod params;

pub use graph::{softmax, Gradients, Graph, ReluRule, Var};
pub use kernels::Window3;
pub use params::ParamStore;

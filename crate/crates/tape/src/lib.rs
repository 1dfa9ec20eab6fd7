//! Reverse-mode automatic differentiation over dense row-major `f64` tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! sweeps the record in reverse. Everything runs on one thread in a fixed
//! order, so results are bit-reproducible.

mod graph;
pub mod numeric;
mod ops;
pub mod optim;
mod tensor;

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::{sigmoid_f64, softplus_f64};
pub use optim::{Adam, AdamConfig};
pub use tensor::{broadcast_shape, matmul, Tensor};

//! Dense tensors and a reverse-mode tape.
//!
//! Tensors are plain values generic over `f32` (training) and `f64` (gradient
//! verification). A [`Graph`] records operations on [`Var`] handles in creation
//! order, which is already a topological order, and [`Graph::backward`] walks it
//! once in reverse.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};

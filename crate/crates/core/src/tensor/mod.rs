//! Minimal reverse-mode differentiation: a recording tape, named
//! parameters with Adam state, and finite-difference gradient checks.

mod params;
mod sparse;
mod tape;

pub use params::{adam_step, forward_backward, grad_check, Bindings, Grads, Param, ParamStore, CHECKPOINT_VERSION};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Matrix, Tape, Var};

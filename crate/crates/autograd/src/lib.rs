//! A compact reverse-mode automatic differentiation engine over `f64` arrays.
//!
//! Backward rules are expressed with the same differentiable operations as the
//! forward pass, so gradients can be differentiated again (`create_graph`).

mod grad;
pub mod gradcheck;
mod ops;
pub mod optim;
pub mod sparse;
mod tensor;

pub use grad::grad;
pub use optim::Adam;
pub use sparse::{Csr, SparseMatrix};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

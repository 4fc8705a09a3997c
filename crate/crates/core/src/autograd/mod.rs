//! Dense 64-bit tensors, a reverse-mode tape and finite-difference checking.

mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use ops::{cosine, softmax, CosineArg, EPSILON_NORM};
pub use params::ParameterSet;
pub use tensor::{dot, norm, Tensor};

pub(crate) use ops::{mean_rows, softmax_unchecked};

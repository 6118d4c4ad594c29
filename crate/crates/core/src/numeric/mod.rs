//! Dense tensors, a define-by-run tape for reverse-mode gradients, and a
//! finite-difference oracle.

mod gradcheck;
pub mod kernels;
mod nn;
mod ops;
mod tape;
pub(crate) mod tensor;

pub use gradcheck::{check_gradients, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

//! Reverse-mode automatic differentiation over a small fixed primitive set,
//! the Adam optimizer, and a central finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::{matmul_raw, sigmoid};
pub use tensor::{checksum_all, Tensor, TensorId};

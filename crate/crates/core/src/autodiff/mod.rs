//! Dense double-precision tensors, a reverse-mode tape and Adam.

mod activation;
mod adam;
mod edges;
mod gradcheck;
mod tape;
mod tensor;

pub use activation::Activation;
pub use adam::{AdamConfig, AdamState};
pub use edges::EdgeList;
pub use gradcheck::{gradient_check, relative_error, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
pub(crate) use tensor::dot;

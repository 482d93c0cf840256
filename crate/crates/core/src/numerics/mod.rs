//! Dense tensors, reverse-mode differentiation, optimizer, and on-disk container.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, check_gradients_at, check_gradients_multi, GradCheckReport, GRAD_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

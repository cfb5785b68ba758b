//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_grad, relative_error, GradCheckReport, DEFAULT_STEP};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tape::{Gradients, StopGradients, Tape, Var, SOFTMAX_MACS_PER_ENTRY};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

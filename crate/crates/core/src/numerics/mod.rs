//! Dense kernels, layer primitives and the finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
pub mod layers;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_gradient, FdGradient, GradCheckReport, ParamSet, Probe};
pub use layers::{l2_normalize, rmsnorm, rotary_rotate, scaled_masked_softmax};
pub use tensor::Tensor;

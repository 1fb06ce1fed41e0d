//! Dense `f64` tensors and a minimal reverse-mode autodiff tape, sized for
//! training a small 1-D convolutional denoiser on a CPU.

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Elementwise, Operand, Tensor, GROUP_NORM_EPS};

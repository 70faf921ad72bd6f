//! Minimal reverse-mode automatic differentiation over dense, row-major tensors.
//!
//! The op set is deliberately narrow: strided 3×3 convolution and transposed
//! convolution, batch normalization, fully connected layers, a few pointwise
//! activations and the reductions needed to form a scalar loss. Gradients are
//! produced for every node on the [`Tape`] that requires them, which includes
//! marked inputs as well as parameters.
//!
//! All accumulation happens in a fixed order, so forward and backward passes
//! are bit-reproducible for identical inputs.

mod adam;
mod error;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::NnError;
pub use scalar::Scalar;
pub use tape::{BatchNormMode, BnRunning, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

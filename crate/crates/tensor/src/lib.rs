//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The building blocks here are enough to train small convolutional and
//! attention networks on a CPU: broadcasting elementwise math, GEMM-backed
//! matrix products and convolutions, last-axis normalizations, and the
//! reshaping ops attention needs. [`ParamStore`] and [`Adam`] handle the
//! training loop plumbing, [`grad_check`] verifies every adjoint.

mod error;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use ops::nn::{LAYER_NORM_EPS, NORM_FLOOR};
pub use optim::{clip_grad_norm, Adam};
pub use params::{Bindings, Checkpoint, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Reverse-mode automatic differentiation for small dense and
//! convolutional networks.
//!
//! Values are recorded eagerly on a [`Tape`]; [`Tape::backward`] sweeps the
//! tape once in reverse and returns [`Gradients`]. Trainable tensors live in
//! a [`ParamStore`] and are updated by [`AdamState`]. Everything is generic
//! over [`Real`] so the same graph runs in `f32` for training and `f64` for
//! finite-difference checks.

pub mod adam;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod linalg;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_params, relative_error, Coordinates, GradCheckOptions, GradCheckReport, KinkPolicy};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::{Precision, Real};
pub use tape::{Activation, ClipGradient, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;

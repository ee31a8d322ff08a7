//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! pulled from a [`ParamStore`] by name, and [`Tape::backward`] returns the
//! gradients keyed by those names. The engine is generic over `f32` (training)
//! and `f64` (gradient checking).

mod conv;
mod error;
mod float;
mod params;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use params::ParamStore;
pub use tape::{Gradients, SparseRows, Tape, Var};
pub use tensor::Tensor;

//! Dense `f64` tensors recorded on a reverse-mode tape.
//!
//! The engine is deliberately small: it implements exactly the operations the
//! trajectory model needs (matrix products, convolutions, attention pieces,
//! layer normalization, RoI-Align), an Adam optimizer and a central
//! finite-difference oracle used to verify every backward rule.

pub mod adam;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use error::{NumericsError, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{RoiBox, Tape, Var};
pub use tensor::Tensor;

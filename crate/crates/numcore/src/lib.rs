//! Dense `f64` tensor arithmetic with a define-by-run reverse-mode tape and
//! an Adam optimizer.
//!
//! A fresh [`Tape`] is built for every forward pass. Persistent parameters
//! live in a [`ParamStore`] and are bound onto the tape as leaves; after
//! [`Tape::backward`] their gradients are accumulated back into the store.

mod adam;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NumError, Result};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Attribute transfer between two non-parallel text corpora with an
//! attention encoder-decoder trained jointly with a CNN classifier.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
mod error;
pub mod fsio;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod prepare;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

//! Uncertainty-aware adversarial domain adaptation on small dense networks.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors.
//! Randomness is derived from a root seed, so training is reproducible.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};

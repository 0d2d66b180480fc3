//! Desk-scale laboratory for feature-focusing adversarial training.
//!
//! The pipeline under study splits an adversarial image into a natural
//! pattern (high bit-planes) and a perturbed pattern (low bit-planes),
//! measures what each pattern tells a feature extractor, and trains a
//! small convolutional network with losses that pull features toward the
//! natural pattern while keeping decision margins wide.
//!
//! Everything runs on CPU with 64-bit floats and seeded generators, so a
//! run is reproducible down to the byte.

pub mod attacks;
pub mod bitplane;
pub mod cli;
pub mod data;
pub mod error;
pub mod infotheory;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

//! Low-frequency deep image steganography.
//!
//! A secret image is turned into a low-frequency feature map by an embedding
//! network and added to a cover image; a retrieval network recovers the
//! secret from (possibly attacked) containers and answers clean inputs with a
//! black image. The crate also carries the frequency-domain tooling, the
//! attack suite and the evaluation metrics used to study such models.

pub mod attacks;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod spectral;
pub mod training;

#[cfg(test)]
mod properties;

pub use error::{Error, Result};
pub use imaging::{FeatureMap, Image, SeededRng};

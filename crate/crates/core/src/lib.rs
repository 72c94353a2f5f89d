//! Coarse-to-fine image search at the species level.

mod binio;
pub mod classifier;
pub mod cnnets;
pub mod engine;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod pgm;
pub mod pipeline;
pub mod region;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

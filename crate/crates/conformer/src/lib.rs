//! Training and evaluation library for a causal-convolution-augmented
//! decoder language model over character and raw-audio token streams.

pub mod data;
mod error;
pub mod model;
pub mod train;

pub use error::{Error, Result};

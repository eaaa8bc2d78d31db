//! Packed-sequence finetuning of a small causal language model for
//! function-level vulnerability detection.

pub mod autograd;
pub mod checkpoint;
pub mod datasetgen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod packing;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

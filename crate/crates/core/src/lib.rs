//! Layer-wise post-training quantization analysis.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
mod fsutil;
pub mod graph;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use graph::{NetworkGraph, LayerNode, LayerKind, Activation};
pub use tensor::Tensor;

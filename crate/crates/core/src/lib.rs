//! Transformer inference with EL-attention alongside cached and uncached
//! multi-head attention, search strategies on top of a toy model, and an
//! accounting model for compute, memory movement and cache size.

pub mod attention;
pub mod decoding;
pub mod model;
pub mod perf;
pub mod tensor;

pub use tensor::{Rng, Scalar, Tensor, TensorError};

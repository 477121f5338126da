//! Core library: data synthesis and manipulation, training, unlearning
//! procedures, and evaluation for a corrective-unlearning benchmark.

pub mod data;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod harness;
pub mod loss;
pub mod methods;
pub mod model;
pub mod optim;
pub mod seeds;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

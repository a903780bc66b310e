//! Discriminative Fisher-vector network for video classification.
//!
//! Layers: local feature extraction, spatio-temporal pooling, a trainable
//! projection, a diagonal Gaussian mixture, Fisher-vector encoding and a
//! one-vs-all squared-hinge classifier. Each layer has a forward and a manual
//! backward pass so the whole stack can be finetuned end to end.

pub mod bundle;
pub mod config;
pub mod data;
pub mod error;
pub mod extract;
pub mod fisher;
pub mod gmm;
pub mod pipeline;
pub mod pool;
pub mod reduce;
pub mod rng;
pub mod svm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor4;

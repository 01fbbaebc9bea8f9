//! Multi-modal behavior cloning from unlabeled mixed demonstrations.
//!
//! A bi-directional LSTM with attention pooling encodes each demonstration
//! into a categorical posterior; a straight-through Gumbel-Softmax sample of
//! that posterior conditions an MLP policy. After training, each one-hot
//! latent selects one behavior.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod eval;
mod error;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

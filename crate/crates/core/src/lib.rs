//! Bayesian evidential deep learning: deterministic moment propagation through
//! networks with Gaussian weight distributions, marginal-likelihood training
//! objectives, and uncertainty metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod moments;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod train;
pub mod uncertainty;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

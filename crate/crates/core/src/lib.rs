pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod lleb;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Spatiotemporal graph neural networks for forecasting regional case counts.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod temporal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

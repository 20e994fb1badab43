//! Navigation memory for multi-goal gridworld navigation: a topological
//! short-term map with attention-driven forgetting, a recurrent long-term
//! global node, and a graph-attention working memory feeding an LSTM policy.

pub mod agent;
pub mod artifacts;
pub mod encoders;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default scalar for the pipeline.
pub type Real = f64;
pub type Tensor = tensor::Tensor2D<Real>;
pub type Params = tensor::ParamStore<Real>;
pub type Tensor32 = tensor::Tensor2D<f32>;
pub type Params32 = tensor::ParamStore<f32>;

#[cfg(test)]
mod testutil;

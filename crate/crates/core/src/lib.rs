//! Partially supervised reinforcement learning on classic-control POMDPs.
//!
//! A state predictor `g` (observation -> semantic state) is trained jointly
//! with a state-level policy on the sum of an RL loss and a weighted
//! supervised state loss. The crate bundles the numeric core, the
//! environments, the agents, exact tabular oracles, and the experiment harness.

pub mod agents;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nn;
pub mod scalar;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;

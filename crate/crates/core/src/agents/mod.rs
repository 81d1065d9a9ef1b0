//! Learning agents over partially observed environments: the composed
//! policy, its losses, DDQN and PPO trainers, and ablation schedules.

pub mod audit;
pub mod bundle;
pub mod config;
pub mod losses;
pub mod replay;
pub mod trainer;

pub use bundle::{encoder, Batch, Decision, Explore, Frozen, Input, LossWeights, Optimizers, PolicyBundle};
pub use config::{Algo, Mode, TrainConfig};
pub use losses::LossReport;
pub use replay::{ReplayBuffer, Transition};
pub use trainer::{rollout, EpisodeRecord, EvalRecord, Observer, Rollout, Trainer};

#[cfg(test)]
mod tests;

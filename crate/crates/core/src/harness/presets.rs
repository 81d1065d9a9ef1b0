//! Named experiment configurations for the desk-scale comparisons.

use super::config::ExperimentConfig;
use crate::agents::{Algo, Mode, TrainConfig};
use crate::envs::{EnvConfig, EnvKind, ObsKind};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 6] = [
    "cartpole_ddqn",
    "acrobot_ddqn",
    "mountain_car_ddqn",
    "pendulum_ppo",
    "cartpole_cont_ppo",
    "cartpole_identity",
];

fn projection(kind: EnvKind) -> EnvConfig {
    EnvConfig {
        projection_dim: 32,
        noise: 0.05,
        frame_stack: 2,
        ..EnvConfig::new(kind, ObsKind::Projection)
    }
}

/// Supervised weight of every preset. At 1 the critic gradient reaching `g`
/// outweighs the state loss and the predictor barely improves on its
/// initialisation.
pub const PRESET_BETA: f64 = 1000.0;

/// DDQN presets decay the learning rate; at a constant rate runs that reach the
/// step cap often collapse shortly before the final evaluation.
fn ddqn(env_steps: usize) -> TrainConfig {
    TrainConfig { algo: Algo::Ddqn, env_steps, beta: PRESET_BETA, lr_decay: true, ..Default::default() }
}

fn ppo(env_steps: usize) -> TrainConfig {
    TrainConfig {
        algo: Algo::Ppo,
        env_steps,
        episodes_per_update: 4,
        ppo_epochs: 10,
        ppo_minibatch: 64,
        lr: 3e-4,
        beta: PRESET_BETA,
        ..Default::default()
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (env, train) = match name {
        "cartpole_ddqn" => (projection(EnvKind::CartPole), ddqn(200_000)),
        "acrobot_ddqn" => (projection(EnvKind::Acrobot), ddqn(100_000)),
        "mountain_car_ddqn" => (projection(EnvKind::MountainCar), ddqn(100_000)),
        "pendulum_ppo" => (projection(EnvKind::Pendulum), TrainConfig { gamma: 0.9, ..ppo(300_000) }),
        "cartpole_cont_ppo" => (projection(EnvKind::CartPoleCont), ppo(100_000)),
        "cartpole_identity" => (
            EnvConfig { frame_stack: 1, ..EnvConfig::new(EnvKind::CartPole, ObsKind::Identity) },
            ddqn(150_000),
        ),
        other => {
            return Err(Error::Config(format!("unknown preset `{other}`; known: {}", PRESETS.join(", "))));
        }
    };
    Ok(ExperimentConfig {
        label: name.to_string(),
        env,
        train,
        seeds: (0..5).collect(),
        modes: vec![Mode::Psrl, Mode::E2e],
        ..Default::default()
    })
}

//! Finite-difference audits of every training loss on small fixtures.

use rand::Rng;
use rand_distr::StandardNormal;

use super::bundle::{Batch, Explore, LossWeights, PolicyBundle};
use super::config::{Algo, Mode, TrainConfig};
use super::losses::LossReport;
use super::replay::Transition;
use super::trainer::stream;
use crate::envs::{EnvConfig, EnvKind, ObsKind, PomdpEnv};
use crate::error::Result;
use crate::nn::{audit, GradReport};

pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditLoss {
    Critic,
    Actor,
    Entropy,
    Supervised,
    Composite,
}

impl AuditLoss {
    pub const ALL: [AuditLoss; 5] = [
        AuditLoss::Critic,
        AuditLoss::Actor,
        AuditLoss::Entropy,
        AuditLoss::Supervised,
        AuditLoss::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AuditLoss::Critic => "critic",
            AuditLoss::Actor => "actor",
            AuditLoss::Entropy => "entropy",
            AuditLoss::Supervised => "supervised",
            AuditLoss::Composite => "composite",
        }
    }
}

/// A small bundle plus a batch collected from its own environment.
pub struct Fixture {
    pub bundle: PolicyBundle,
    pub batch: Batch,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub q_targets: Vec<f64>,
}

pub fn fixture(algo: Algo, mode: Mode, env: EnvKind, k: usize, seed: u64) -> Result<Fixture> {
    let env_cfg = EnvConfig {
        projection_dim: 8,
        frame_stack: 2,
        seed,
        ..EnvConfig::new(env, ObsKind::Projection)
    };
    let mut env = PomdpEnv::new(&env_cfg)?;
    let cfg = TrainConfig {
        algo,
        mode,
        k,
        hidden: 6,
        predictor_hidden: 6,
        seed,
        ..Default::default()
    };
    let mut rng = stream(seed, 0xa0d1);
    let bundle = PolicyBundle::new(&cfg, &env.observation_shape(), env.state_scale().clone(), env.action_space(), &mut rng)?;
    let explore = if algo == Algo::Ddqn { Explore::EpsilonGreedy(0.5) } else { Explore::Sample };
    let mut data = Vec::new();
    let (mut state, mut obs) = env.reset(seed);
    while data.len() < 8 {
        let d = bundle.act(&obs, &state, explore, &mut rng)?;
        let step = env.step(&d.action)?;
        let terminal = step.terminal();
        // offset the behaviour log-probability so some ratios are clipped
        let offset: f64 = rng.gen_range(-0.3..0.3);
        data.push(Transition {
            state: state.clone(),
            observation: obs.clone(),
            action: d.stored,
            reward: step.reward,
            next_state: step.next_state.clone(),
            next_observation: step.next_observation.clone(),
            done: step.done,
            terminal,
            log_prob: d.log_prob.map(|l| l + offset),
        });
        if step.done {
            (state, obs) = env.reset(seed.wrapping_add(data.len() as u64));
        } else {
            state = step.next_state;
            obs = step.next_observation;
        }
    }
    let refs: Vec<&Transition> = data.iter().collect();
    let batch = Batch::new(&refs, &bundle.obs_shape, &bundle.scale)?;
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..8).map(|_| rng.sample(StandardNormal)).collect() };
    let advantages = normal(&mut rng);
    let value_targets = normal(&mut rng);
    let q_targets = if algo == Algo::Ddqn { bundle.ddqn_targets(&batch, 0.99)? } else { Vec::new() };
    Ok(Fixture {
        bundle,
        batch,
        advantages,
        value_targets,
        q_targets,
    })
}

fn evaluate(f: &Fixture, b: &mut PolicyBundle, w: LossWeights, backward: bool) -> Result<LossReport> {
    match b.algo {
        Algo::Ddqn => b.ddqn_loss(&f.batch, &f.q_targets, w, backward),
        Algo::Ppo => b.ppo_loss(&f.batch, &f.advantages, &f.value_targets, 0.2, w, backward),
    }
}

/// Audits the gradient of the `w`-weighted composite on one fixture.
pub fn audit_fixture(f: &mut Fixture, w: LossWeights) -> Result<GradReport> {
    let mut bundle = f.bundle.clone();
    let report = audit(
        &mut bundle,
        |b| Ok(evaluate(f, b, w, true)?.composite),
        |b| Ok(evaluate(f, &mut b.clone(), w, false)?.composite),
        AUDIT_TOLERANCE,
    )?;
    f.bundle = bundle;
    Ok(report)
}

fn weights(critic: f64, actor: f64, entropy: f64, state: f64) -> LossWeights {
    LossWeights { critic, actor, entropy, state }
}

/// Worst-case report over the fixtures exercising `which`.
pub fn audit_loss(which: AuditLoss, seed: u64) -> Result<GradReport> {
    use Algo::*;
    use EnvKind::*;
    let cases: Vec<(Algo, Mode, EnvKind, usize, LossWeights)> = match which {
        AuditLoss::Critic => vec![
            (Ddqn, Mode::Psrl, CartPole, 2, weights(1.0, 0.0, 0.0, 0.0)),
            (Ddqn, Mode::Asym, Acrobot, 0, weights(1.0, 0.0, 0.0, 0.0)),
            (Ppo, Mode::Psrl, Pendulum, 0, weights(1.0, 0.0, 0.0, 0.0)),
        ],
        AuditLoss::Actor => vec![
            (Ppo, Mode::Psrl, CartPole, 2, weights(0.0, 1.0, 0.0, 0.0)),
            (Ppo, Mode::Psrl, Pendulum, 0, weights(0.0, 1.0, 0.0, 0.0)),
        ],
        AuditLoss::Entropy => vec![
            (Ppo, Mode::Psrl, Acrobot, 2, weights(0.0, 0.0, 1.0, 0.0)),
            (Ppo, Mode::Psrl, CartPoleCont, 0, weights(0.0, 0.0, 1.0, 0.0)),
        ],
        AuditLoss::Supervised => vec![
            (Ddqn, Mode::Psrl, MountainCar, 2, weights(0.0, 0.0, 0.0, 1.0)),
            (Ppo, Mode::Psrl, Pendulum, 0, weights(0.0, 0.0, 0.0, 1.0)),
        ],
        AuditLoss::Composite => vec![
            (Ddqn, Mode::Psrl, CartPole, 2, weights(1.0, 0.0, 0.0, 1.0)),
            (Ppo, Mode::Psrl, Pendulum, 2, weights(1.0, 1.0, 0.01, 1.0)),
            (Ppo, Mode::Asym, CartPole, 0, weights(1.0, 1.0, 0.01, 1.0)),
        ],
    };
    let mut worst: Option<GradReport> = None;
    for (algo, mode, env, k, w) in cases {
        let mut f = fixture(algo, mode, env, k, seed)?;
        let r = audit_fixture(&mut f, w)?;
        if worst.as_ref().map_or(true, |x| r.max_rel_error > x.max_rel_error) {
            worst = Some(GradReport { checked: r.checked + worst.as_ref().map_or(0, |x| x.checked), ..r });
        } else if let Some(x) = worst.as_mut() {
            x.checked += r.checked;
        }
    }
    Ok(worst.expect("at least one case"))
}

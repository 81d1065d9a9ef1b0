use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Ddqn,
    Ppo,
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddqn" => Ok(Algo::Ddqn),
            "ppo" => Ok(Algo::Ppo),
            _ => Err(Error::Config(format!("unknown algorithm '{s}' (expected ddqn | ppo)"))),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Ddqn => "ddqn",
            Algo::Ppo => "ppo",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Policy reads the true state; no predictor.
    TrueState,
    /// Same architecture as `Psrl`, supervised weight forced to zero.
    E2e,
    Psrl,
    /// Train the predictor first, then freeze it and train the policy.
    ReprFirst,
    /// Train the policy on true states first, then freeze it and fit the predictor.
    PolicyFirst,
    /// `Psrl` with a critic that reads the true state.
    Asym,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::TrueState,
        Mode::E2e,
        Mode::Psrl,
        Mode::ReprFirst,
        Mode::PolicyFirst,
        Mode::Asym,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TrueState => "true_state",
            Mode::E2e => "e2e",
            Mode::Psrl => "psrl",
            Mode::ReprFirst => "repr_first",
            Mode::PolicyFirst => "policy_first",
            Mode::Asym => "asym",
        }
    }

    pub fn has_predictor(self) -> bool {
        self != Mode::TrueState
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown mode '{s}' (expected true_state | e2e | psrl | repr_first | policy_first | asym)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    pub mode: Mode,
    /// Latent width of `h`; 0 removes it.
    pub k: usize,
    /// Weight of the supervised state loss.
    pub beta: f64,
    /// Actor-loss weight (PPO only).
    pub alpha1: f64,
    /// Entropy weight (PPO only).
    pub alpha2: f64,
    pub gamma: f64,
    /// PPO clip range.
    pub eta: f64,
    pub batch_size: usize,
    /// Episodes collected per PPO update.
    pub episodes_per_update: usize,
    /// DDQN gradient step every this many env steps.
    pub train_every: usize,
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `env_steps` over which epsilon decays linearly.
    pub epsilon_decay: f64,
    pub env_steps: usize,
    pub lr: f64,
    /// Critic learning rate; `lr` when absent.
    pub lr_critic: Option<f64>,
    /// Linear learning-rate decay to zero over `env_steps`.
    pub lr_decay: bool,
    pub buffer_capacity: usize,
    /// DDQN updates start once the buffer holds this many transitions.
    pub learning_starts: usize,
    /// Hidden width of the policy/critic heads.
    pub hidden: usize,
    /// Hidden width of `g` and `h`.
    pub predictor_hidden: usize,
    pub ppo_epochs: usize,
    pub ppo_minibatch: usize,
    pub normalize_advantages: bool,
    pub grad_clip: Option<f64>,
    /// Phase-1 share of `env_steps` for the ablation modes.
    pub pretrain_frac: f64,
    pub log_std_init: f64,
    /// Training episodes between evaluations.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::Ddqn,
            mode: Mode::Psrl,
            k: 0,
            beta: 1.0,
            alpha1: 1.0,
            alpha2: 0.01,
            gamma: 0.99,
            eta: 0.2,
            batch_size: 64,
            episodes_per_update: 1,
            train_every: 4,
            target_sync: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.1,
            env_steps: 100_000,
            lr: 1e-3,
            lr_critic: None,
            lr_decay: false,
            buffer_capacity: 50_000,
            learning_starts: 1000,
            hidden: 64,
            predictor_hidden: 64,
            ppo_epochs: 10,
            ppo_minibatch: 64,
            normalize_advantages: true,
            grad_clip: Some(10.0),
            pretrain_frac: 0.0,
            log_std_init: -0.5,
            eval_every: 10,
            eval_episodes: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return bad("alpha1 and alpha2 must be >= 0");
        }
        if self.algo == Algo::Ppo && self.alpha1 <= 0.0 {
            return bad("PPO requires alpha1 > 0");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.episodes_per_update == 0 || self.train_every == 0 || self.target_sync == 0 {
            return bad("batch_size, episodes_per_update, train_every and target_sync must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad("epsilon_decay must lie in (0, 1]");
        }
        if !(self.lr > 0.0) || self.lr_critic.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.buffer_capacity == 0 || self.hidden == 0 || self.predictor_hidden == 0 {
            return bad("buffer_capacity and hidden widths must be >= 1");
        }
        if self.ppo_epochs == 0 || self.ppo_minibatch == 0 {
            return bad("ppo_epochs and ppo_minibatch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.pretrain_frac) {
            return bad("pretrain_frac must lie in [0, 1]");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }

    /// Supervised weight actually applied (zero for the end-to-end baseline).
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::E2e | Mode::TrueState => 0.0,
            _ => self.beta,
        }
    }

    /// `(alpha1, alpha2)`; DDQN has no actor or entropy term.
    pub fn effective_alphas(&self) -> (f64, f64) {
        match self.algo {
            Algo::Ddqn => (0.0, 0.0),
            Algo::Ppo => (self.alpha1, self.alpha2),
        }
    }

    /// Env steps spent in phase 1 of an ablation schedule.
    pub fn phase_one_steps(&self) -> usize {
        match self.mode {
            Mode::ReprFirst | Mode::PolicyFirst => (self.pretrain_frac * self.env_steps as f64).round() as usize,
            _ => 0,
        }
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = (self.epsilon_decay * self.env_steps as f64).max(1.0);
        let t = (step as f64 / horizon).min(1.0);
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

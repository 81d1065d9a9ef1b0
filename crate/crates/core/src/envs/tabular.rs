//! Finite MDP exposed through the [`Dynamics`] interface; the state vector is
//! the embedding coordinate of the current discrete state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Dynamics};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct TabularDynamics {
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    /// Row-major `[s][a]`.
    rewards: Vec<f64>,
    embedding: Vec<Vec<f64>>,
    initial: Vec<f64>,
    num_actions: usize,
    cap: usize,
    current: usize,
    rng: ChaCha8Rng,
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl TabularDynamics {
    pub fn new(
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        embedding: Vec<Vec<f64>>,
        initial: Vec<f64>,
        num_actions: usize,
        cap: usize,
    ) -> Result<Self> {
        let s = embedding.len();
        if s == 0 || num_actions == 0 {
            return Err(Error::Config("tabular env needs states and actions".into()));
        }
        if transitions.len() != s * num_actions * s || rewards.len() != s * num_actions || initial.len() != s {
            return Err(Error::Config("tabular env table sizes disagree".into()));
        }
        let d = embedding[0].len();
        if d == 0 || embedding.iter().any(|e| e.len() != d) {
            return Err(Error::Config("embedding points must share a nonzero dimension".into()));
        }
        Ok(TabularDynamics {
            transitions,
            rewards,
            embedding,
            initial,
            num_actions,
            cap,
            current: 0,
            rng: rand::SeedableRng::seed_from_u64(0),
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn num_states(&self) -> usize {
        self.embedding.len()
    }

    fn index_of(&self, point: &[f64]) -> Option<usize> {
        self.embedding.iter().position(|e| e.as_slice() == point)
    }
}

impl Dynamics for TabularDynamics {
    fn state_dim(&self) -> usize {
        self.embedding[0].len()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.num_actions)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.rng = rand::SeedableRng::seed_from_u64(rng.gen());
        self.current = sample_categorical(&self.initial, &mut self.rng);
    }

    fn step(&mut self, action: &Action) -> Result<(f64, bool)> {
        let a = match action {
            Action::Discrete(a) if *a < self.num_actions => *a,
            other => {
                return Err(Error::Env(format!(
                    "action {other:?} outside Discrete({})",
                    self.num_actions
                )))
            }
        };
        let s = self.num_states();
        let reward = self.rewards[self.current * self.num_actions + a];
        let row = (self.current * self.num_actions + a) * s;
        self.current = sample_categorical(&self.transitions[row..row + s], &mut self.rng);
        Ok((reward, false))
    }

    fn state(&self) -> Vec<f64> {
        self.embedding[self.current].clone()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        self.current = self
            .index_of(state)
            .ok_or_else(|| Error::Env(format!("{state:?} is not an embedded state")))?;
        Ok(())
    }

    fn state_scale(&self) -> Vec<(f64, f64)> {
        (0..self.state_dim())
            .map(|j| {
                let lo = self.embedding.iter().map(|e| e[j]).fold(f64::INFINITY, f64::min);
                let hi = self.embedding.iter().map(|e| e[j]).fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo - 1.0, lo + 1.0)
                }
            })
            .collect()
    }

    fn default_cap(&self) -> usize {
        self.cap
    }
}

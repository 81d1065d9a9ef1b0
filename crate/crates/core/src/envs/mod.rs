//! Classic-control tasks lifted into POMDPs that emit both the true state and
//! an observation of it.

pub mod classic;
pub mod markov;
pub mod render;
pub mod tabular;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classic::{Acrobot, CartPole, MountainCar, Pendulum};
pub use markov::{markov_noise_floor, markov_sufficiency_score, MarkovReport};
pub use render::render_raster;
pub use tabular::TabularDynamics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Acrobot,
    #[serde(rename = "cartpole")]
    CartPole,
    #[serde(rename = "cartpole_cont")]
    CartPoleCont,
    MountainCar,
    Pendulum,
    /// Finite MDP embedded in a grid; built programmatically, not by name.
    Tabular,
}

impl EnvKind {
    pub const NAMED: [EnvKind; 5] = [
        EnvKind::Acrobot,
        EnvKind::CartPole,
        EnvKind::CartPoleCont,
        EnvKind::MountainCar,
        EnvKind::Pendulum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::Acrobot => "acrobot",
            EnvKind::CartPole => "cartpole",
            EnvKind::CartPoleCont => "cartpole_cont",
            EnvKind::MountainCar => "mountain_car",
            EnvKind::Pendulum => "pendulum",
            EnvKind::Tabular => "tabular",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::NAMED
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown environment '{s}' (expected acrobot | cartpole | cartpole_cont | mountain_car | pendulum)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    Identity,
    Projection,
    Raster,
    /// A subset of true-state components (diagnostics only).
    Select,
}

impl FromStr for ObsKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ObsKind::Identity),
            "projection" => Ok(ObsKind::Projection),
            "raster" => Ok(ObsKind::Raster),
            "select" => Ok(ObsKind::Select),
            _ => Err(Error::Config(format!(
                "unknown observation mode '{s}' (expected raster | projection | identity)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvKind,
    pub obs: ObsKind,
    /// History window k.
    pub frame_stack: usize,
    pub projection_dim: usize,
    /// Std of the additive Gaussian noise in projection mode.
    pub noise: f64,
    pub width: usize,
    pub height: usize,
    /// State components exposed in `select` mode.
    pub visible: Vec<usize>,
    /// Episode length cap; the task's standard limit when absent.
    pub max_steps: Option<usize>,
    /// Half-width of the uniform initial-state box (cartpole family only).
    pub init_scale: Option<f64>,
    /// Pendulum viscous damping.
    pub damping: f64,
    /// Acrobot integration sub-steps per control step.
    pub substeps: usize,
    /// Seed of the fixed projection matrix.
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: EnvKind::CartPole,
            obs: ObsKind::Projection,
            frame_stack: 2,
            projection_dim: 32,
            noise: 0.05,
            width: 40,
            height: 40,
            visible: Vec::new(),
            max_steps: None,
            init_scale: None,
            damping: 0.0,
            substeps: 4,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn new(name: EnvKind, obs: ObsKind) -> Self {
        EnvConfig {
            name,
            obs,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_stack < 1 {
            return Err(Error::Config("frame_stack must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("projection noise must be >= 0".into()));
        }
        if self.obs == ObsKind::Raster && (self.width < 8 || self.height < 8) {
            return Err(Error::Config("raster must be at least 8x8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    /// Number of discrete actions, or the dimension of the box.
    pub fn size(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSpace::Discrete(n) if *n >= 2 => Ok(()),
            ActionSpace::Box { low, high }
                if !low.is_empty()
                    && low.len() == high.len()
                    && low.iter().zip(high).all(|(l, h)| l < h) =>
            {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid action space {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// True-state simulator. Implementations own their physical state.
pub trait Dynamics: Send {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// Advances one control step; returns `(reward, terminal)`.
    fn step(&mut self, action: &Action) -> Result<(f64, bool)>;
    fn state(&self) -> Vec<f64>;
    fn set_state(&mut self, state: &[f64]) -> Result<()>;
    /// Per-component `(low, high)` used to normalise states to `[-1, 1]`.
    fn state_scale(&self) -> Vec<(f64, f64)>;
    fn default_cap(&self) -> usize;
}

/// Affine map between raw state units and `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateScale {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl StateScale {
    pub fn new(bounds: &[(f64, f64)]) -> Self {
        StateScale {
            low: bounds.iter().map(|b| b.0).collect(),
            high: bounds.iter().map(|b| b.1).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Normalises and clamps to `[-1, 1]`.
    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&s, (&l, &h))| (2.0 * (s - l) / (h - l) - 1.0).clamp(-1.0, 1.0))
            .collect()
    }

    pub fn denormalize(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(&u, (&l, &h))| l + (u + 1.0) * 0.5 * (h - l))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    /// Frame-stacked observation after the step.
    pub next_observation: Vec<f64>,
    pub reward: f64,
    /// Episode over (terminal or truncated).
    pub done: bool,
    /// Ended by the length cap rather than by the task.
    pub truncated: bool,
}

impl StepResult {
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

/// `o = M s + N(0, sigma^2)`; `matrix` is row-major `m x n`.
pub fn project_obs(state: &[f64], matrix: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = state.len();
    matrix
        .chunks(n)
        .map(|row| {
            let clean: f64 = row.iter().zip(state).map(|(m, s)| m * s).sum();
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                clean + sigma * z
            } else {
                clean
            }
        })
        .collect()
}

/// Fixed Gaussian projection with entries `N(0, 1/n)`, columns pre-divided by
/// the state half-widths so every component contributes on a unit scale.
pub fn projection_matrix(m: usize, scale: &StateScale, seed: u64) -> Vec<f64> {
    let n = scale.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a0e_c7);
    let half = scale.half_widths();
    let sd = (1.0 / n as f64).sqrt();
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        for h in &half {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(sd * z / h);
        }
    }
    out
}

/// History window over the last `k` single-frame observations.
#[derive(Clone, Debug)]
pub struct FrameStack {
    k: usize,
    frames: VecDeque<Vec<f64>>,
}

impl FrameStack {
    pub fn new(k: usize) -> Self {
        FrameStack {
            k: k.max(1),
            frames: VecDeque::with_capacity(k.max(1)),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        if self.frames.len() == self.k {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    /// Oldest first; missing history is filled with the earliest frame.
    pub fn stacked(&self) -> Vec<f64> {
        let Some(first) = self.frames.front() else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(self.k * first.len());
        for _ in self.frames.len()..self.k {
            out.extend_from_slice(first);
        }
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out
    }
}

/// Stacks a history without an env: the last `k` entries of `history`.
pub fn frame_stack(history: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut fs = FrameStack::new(k);
    let start = history.len().saturating_sub(k);
    for o in &history[start..] {
        fs.push(o.clone());
    }
    fs.stacked()
}

#[derive(Clone, Debug)]
enum Lift {
    Identity,
    Select(Vec<usize>),
    Projection { matrix: Vec<f64>, noise: f64 },
    Raster { width: usize, height: usize },
}

/// A dynamics model plus an observation lift and a frame stack.
pub struct PomdpEnv {
    kind: EnvKind,
    config: EnvConfig,
    dynamics: Box<dyn Dynamics>,
    lift: Lift,
    scale: StateScale,
    stack: FrameStack,
    rng: ChaCha8Rng,
    cap: usize,
    steps: usize,
    done: bool,
    started: bool,
}

impl fmt::Debug for PomdpEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PomdpEnv")
            .field("kind", &self.kind)
            .field("obs", &self.config.obs)
            .field("steps", &self.steps)
            .finish()
    }
}

fn make_dynamics(config: &EnvConfig) -> Result<Box<dyn Dynamics>> {
    Ok(match config.name {
        EnvKind::CartPole | EnvKind::CartPoleCont => {
            let mut cp = CartPole::new(config.name == EnvKind::CartPoleCont);
            if let Some(s) = config.init_scale {
                cp.init_scale = s;
            }
            Box::new(cp)
        }
        EnvKind::MountainCar => Box::new(MountainCar::new()),
        EnvKind::Pendulum => Box::new(Pendulum::new(config.damping)),
        EnvKind::Acrobot => Box::new(Acrobot::new(config.substeps)),
        EnvKind::Tabular => {
            return Err(Error::Config(
                "tabular environments are built with PomdpEnv::from_dynamics".into(),
            ))
        }
    })
}

impl PomdpEnv {
    pub fn new(config: &EnvConfig) -> Result<Self> {
        let dynamics = make_dynamics(config)?;
        Self::from_dynamics(config.name, dynamics, config)
    }

    pub fn from_dynamics(kind: EnvKind, dynamics: Box<dyn Dynamics>, config: &EnvConfig) -> Result<Self> {
        config.validate()?;
        dynamics.action_space().validate()?;
        let scale = StateScale::new(&dynamics.state_scale());
        let n = dynamics.state_dim();
        let lift = match config.obs {
            ObsKind::Identity => Lift::Identity,
            ObsKind::Select => {
                if config.visible.is_empty() || config.visible.iter().any(|&d| d >= n) {
                    return Err(Error::Config(format!(
                        "select mode needs visible components in 0..{n}, got {:?}",
                        config.visible
                    )));
                }
                Lift::Select(config.visible.clone())
            }
            ObsKind::Projection => {
                if config.projection_dim <= n {
                    return Err(Error::Config(format!(
                        "projection dim {} must exceed state dim {n}",
                        config.projection_dim
                    )));
                }
                Lift::Projection {
                    matrix: projection_matrix(config.projection_dim, &scale, config.seed),
                    noise: config.noise,
                }
            }
            ObsKind::Raster => Lift::Raster {
                width: config.width,
                height: config.height,
            },
        };
        let cap = config.max_steps.unwrap_or_else(|| dynamics.default_cap());
        Ok(PomdpEnv {
            kind,
            config: config.clone(),
            dynamics,
            lift,
            scale,
            stack: FrameStack::new(config.frame_stack),
            rng: ChaCha8Rng::seed_from_u64(0),
            cap,
            steps: 0,
            done: false,
            started: false,
        })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.dynamics.action_space()
    }

    pub fn state_scale(&self) -> &StateScale {
        &self.scale
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn state(&self) -> Vec<f64> {
        self.dynamics.state()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    /// Length of one un-stacked observation.
    pub fn frame_len(&self) -> usize {
        match &self.lift {
            Lift::Identity => self.state_dim(),
            Lift::Select(d) => d.len(),
            Lift::Projection { matrix, .. } => matrix.len() / self.state_dim(),
            Lift::Raster { width, height } => width * height,
        }
    }

    /// Per-sample shape of the stacked observation.
    pub fn observation_shape(&self) -> Vec<usize> {
        let k = self.stack.k();
        match &self.lift {
            Lift::Raster { width, height } => vec![k, *height, *width],
            _ => vec![k * self.frame_len()],
        }
    }

    pub fn projection_matrix(&self) -> Option<&[f64]> {
        match &self.lift {
            Lift::Projection { matrix, .. } => Some(matrix),
            _ => None,
        }
    }

    /// Single-frame observation of `state`. Reads nothing but `state`
    /// (and the noise stream in projection mode).
    pub fn lift(&mut self, state: &[f64]) -> Vec<f64> {
        match &self.lift {
            Lift::Identity => state.to_vec(),
            Lift::Select(dims) => dims.iter().map(|&d| state[d]).collect(),
            Lift::Projection { matrix, noise } => project_obs(state, matrix, *noise, &mut self.rng),
            Lift::Raster { width, height } => render_raster(self.kind, state, *width, *height),
        }
    }

    /// Samples `s0 ~ rho` and returns `(state, stacked observation)`.
    pub fn reset(&mut self, seed: u64) -> (Vec<f64>, Vec<f64>) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.dynamics.reset(&mut self.rng);
        self.start_from_current()
    }

    /// Starts an episode from an explicit state.
    pub fn reset_to(&mut self, state: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.dynamics.set_state(state)?;
        Ok(self.start_from_current())
    }

    fn start_from_current(&mut self) -> (Vec<f64>, Vec<f64>) {
        self.steps = 0;
        self.done = false;
        self.started = true;
        let state = self.dynamics.state();
        let frame = self.lift(&state);
        self.stack.clear();
        self.stack.push(frame);
        (state, self.stack.stacked())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if !self.started {
            return Err(Error::Env("step before reset".into()));
        }
        if self.done {
            return Err(Error::Env("step after the episode ended".into()));
        }
        let (reward, terminal) = self.dynamics.step(action)?;
        self.steps += 1;
        let truncated = !terminal && self.steps >= self.cap;
        self.done = terminal || truncated;
        let state = self.dynamics.state();
        let frame = self.lift(&state);
        self.stack.push(frame);
        Ok(StepResult {
            next_state: state,
            next_observation: self.stack.stacked(),
            reward,
            done: self.done,
            truncated,
        })
    }
}

//! The composed policy `pi(o) = pi_tilde(g(o), h(o))` with its critic, and
//! the forward/backward passes of every training loss.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{Algo, Mode, TrainConfig};
use super::losses::*;
use super::replay::Transition;
use crate::envs::{Action, ActionSpace, StateScale};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, LayerSpec, Network, Optimizer, Param, Parameterized, Tensor};

/// Which vector feeds the state-level policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Predicted,
    TrueState,
}

/// Components excluded from gradient updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub g: bool,
    pub h: bool,
    pub head: bool,
    pub critic: bool,
}

/// Multipliers of the loss terms; `composite = critic + actor - entropy + state`
/// after weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub critic: f64,
    pub actor: f64,
    pub entropy: f64,
    pub state: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let (actor, entropy) = cfg.effective_alphas();
        LossWeights {
            critic: 1.0,
            actor,
            entropy,
            state: cfg.effective_beta(),
        }
    }

    pub fn supervised() -> Self {
        LossWeights {
            critic: 0.0,
            actor: 0.0,
            entropy: 0.0,
            state: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Explore {
    Greedy,
    EpsilonGreedy(f64),
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    /// Action handed to the environment (clipped into the box).
    pub action: Action,
    /// Action the log-probability refers to (unclipped policy sample).
    pub stored: Action,
    pub log_prob: Option<f64>,
    /// `g(o)` in normalised units, when a predictor exists.
    pub predicted_state: Option<Vec<f64>>,
}

/// A minibatch laid out as tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor<f64>,
    pub next_obs: Tensor<f64>,
    /// Normalised true states.
    pub states: Tensor<f64>,
    pub next_states: Tensor<f64>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminal: Vec<bool>,
    pub old_log_probs: Vec<f64>,
}

impl Batch {
    pub fn new(ts: &[&Transition], obs_shape: &[usize], scale: &StateScale) -> Result<Self> {
        if ts.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let shape = |b: usize| {
            let mut s = vec![b];
            s.extend_from_slice(obs_shape);
            s
        };
        let flat = |f: &dyn Fn(&Transition) -> &[f64]| ts.iter().flat_map(|t| f(t).iter().copied()).collect::<Vec<_>>();
        let norm = |f: &dyn Fn(&Transition) -> &[f64]| ts.iter().flat_map(|t| scale.normalize(f(t))).collect::<Vec<_>>();
        let b = ts.len();
        let n = scale.dim();
        Ok(Batch {
            obs: Tensor::new(shape(b), flat(&|t| &t.observation))?,
            next_obs: Tensor::new(shape(b), flat(&|t| &t.next_observation))?,
            states: Tensor::new(vec![b, n], norm(&|t| &t.state))?,
            next_states: Tensor::new(vec![b, n], norm(&|t| &t.next_state))?,
            actions: ts.iter().map(|t| t.action.clone()).collect(),
            rewards: ts.iter().map(|t| t.reward).collect(),
            terminal: ts.iter().map(|t| t.terminal).collect(),
            old_log_probs: ts.iter().map(|t| t.log_prob.unwrap_or(0.0)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Targets {
    g: Option<Network<f64>>,
    h: Option<Network<f64>>,
    head: Network<f64>,
    critic: Option<Network<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checksums {
    pub g: u64,
    pub h: u64,
    pub head: u64,
    pub log_std: u64,
    pub critic: u64,
    pub target: u64,
}

/// Observation encoder: an MLP for flat inputs, two strided convolutions
/// for `[k, height, width]` rasters.
pub fn encoder(obs_shape: &[usize], outputs: usize, hidden: &[usize], output_act: Option<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Network<f64>> {
    if obs_shape.len() == 1 {
        return Network::mlp(obs_shape[0], hidden, outputs, LayerSpec::Relu, output_act, rng);
    }
    let [c, hgt, wid] = *obs_shape else {
        return Err(Error::Config(format!("unsupported observation shape {obs_shape:?}")));
    };
    let out1 = ((hgt - 4) / 2 + 1, (wid - 4) / 2 + 1);
    let out2 = ((out1.0 - 4) / 2 + 1, (out1.1 - 4) / 2 + 1);
    let mut specs = vec![
        LayerSpec::Conv2d { in_channels: c, out_channels: 16, kernel: 4, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_channels: 16, out_channels: 32, kernel: 4, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ];
    let mut width = 32 * out2.0 * out2.1;
    for &h in hidden {
        specs.push(LayerSpec::Dense { inputs: width, outputs: h });
        specs.push(LayerSpec::Relu);
        width = h;
    }
    specs.push(LayerSpec::Dense { inputs: width, outputs });
    specs.extend(output_act);
    Network::new(obs_shape, &specs, rng)
}

fn run(net: &mut Network<f64>, x: &Tensor<f64>, record: bool) -> Result<Tensor<f64>> {
    if record {
        net.forward(x)
    } else {
        net.predict(x)
    }
}

fn pick(q: &Tensor<f64>, actions: &[Action]) -> Result<Vec<f64>> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| match a {
            Action::Discrete(j) => Ok(q.row_slice(i)[*j]),
            other => Err(Error::Usage(format!("value head needs discrete actions, got {other:?}"))),
        })
        .collect()
}

fn scatter(shape: &[usize], actions: &[Action], values: &[f64]) -> Tensor<f64> {
    let mut d = Tensor::zeros(shape);
    for (i, (a, &v)) in actions.iter().zip(values).enumerate() {
        if let Action::Discrete(j) = a {
            d.row_slice_mut(i)[*j] = v;
        }
    }
    d
}

#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub algo: Algo,
    pub mode: Mode,
    pub state_dim: usize,
    pub k: usize,
    pub obs_shape: Vec<usize>,
    pub action_space: ActionSpace,
    pub scale: StateScale,
    /// State predictor `g` (Tanh output, normalised units).
    pub g: Option<Network<f64>>,
    /// Latent encoder `h`.
    pub h: Option<Network<f64>>,
    /// Q-network (DDQN) or actor (PPO) over `[g(o), h(o)]`.
    pub head: Network<f64>,
    /// Gaussian log standard deviation (continuous PPO).
    pub log_std: Option<Param<f64>>,
    /// PPO value network, or the true-state Q-network of the asymmetric DDQN.
    pub critic: Option<Network<f64>>,
    targets: Option<Targets>,
    pub frozen: Frozen,
    pub input: Input,
    state_reads: Cell<u64>,
}

impl PolicyBundle {
    pub fn new(cfg: &TrainConfig, obs_shape: &[usize], scale: StateScale, action_space: ActionSpace, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        action_space.validate()?;
        let n = scale.dim();
        let obs_len: usize = obs_shape.iter().product();
        if cfg.algo == Algo::Ddqn && !action_space.is_discrete() {
            return Err(Error::Config("DDQN needs a discrete action space".into()));
        }
        let ph = [cfg.predictor_hidden];
        let (g, h) = if cfg.mode.has_predictor() {
            let g = encoder(obs_shape, n, &ph, Some(LayerSpec::Tanh), rng)?;
            let h = if cfg.k > 0 {
                Some(encoder(obs_shape, cfg.k, &ph, Some(LayerSpec::Tanh), rng)?)
            } else {
                None
            };
            (Some(g), h)
        } else {
            (None, None)
        };
        let features = n + h.as_ref().map_or(0, |_| cfg.k);
        let hidden = [cfg.hidden, cfg.hidden];
        let outputs = action_space.size();
        let (head, log_std) = match cfg.algo {
            Algo::Ddqn => (Network::mlp(features, &hidden, outputs, LayerSpec::Relu, None, rng)?, None),
            Algo::Ppo => {
                let head = Network::mlp(features, &hidden, outputs, LayerSpec::Tanh, None, rng)?;
                let log_std = (!action_space.is_discrete())
                    .then(|| Param::new(Tensor::filled(&[outputs], cfg.log_std_init)));
                (head, log_std)
            }
        };
        let asym = cfg.mode == Mode::Asym;
        let critic = match (cfg.algo, asym) {
            (Algo::Ddqn, true) => Some(Network::mlp(n, &hidden, outputs, LayerSpec::Relu, None, rng)?),
            (Algo::Ddqn, false) => None,
            (Algo::Ppo, true) => Some(Network::mlp(n, &hidden, 1, LayerSpec::Tanh, None, rng)?),
            (Algo::Ppo, false) if cfg.mode == Mode::TrueState => {
                Some(Network::mlp(n, &hidden, 1, LayerSpec::Tanh, None, rng)?)
            }
            (Algo::Ppo, false) if obs_shape.len() == 1 => {
                Some(Network::mlp(obs_len, &hidden, 1, LayerSpec::Tanh, None, rng)?)
            }
            (Algo::Ppo, false) => Some(encoder(obs_shape, 1, &[cfg.hidden], None, rng)?),
        };
        let mut bundle = PolicyBundle {
            algo: cfg.algo,
            mode: cfg.mode,
            state_dim: n,
            k: h.as_ref().map_or(0, |_| cfg.k),
            obs_shape: obs_shape.to_vec(),
            action_space,
            scale,
            g,
            h,
            head,
            log_std,
            critic,
            targets: None,
            frozen: Frozen::default(),
            input: if cfg.mode == Mode::TrueState { Input::TrueState } else { Input::Predicted },
            state_reads: Cell::new(0),
        };
        if cfg.algo == Algo::Ddqn {
            bundle.sync_target();
        }
        Ok(bundle)
    }

    /// Critic reads the true state (asymmetric or true-state modes).
    pub fn critic_reads_state(&self) -> bool {
        matches!(self.mode, Mode::Asym | Mode::TrueState)
    }

    pub fn feature_dim(&self) -> usize {
        self.state_dim + self.h.as_ref().map_or(0, |_| self.k)
    }

    /// Number of true-state rows consumed so far (instrumentation).
    pub fn state_reads(&self) -> u64 {
        self.state_reads.get()
    }

    fn read_states(&self, states: &Tensor<f64>) -> Tensor<f64> {
        self.state_reads.set(self.state_reads.get() + states.batch() as u64);
        states.clone()
    }

    pub fn sync_target(&mut self) {
        self.targets = Some(Targets {
            g: self.g.clone(),
            h: self.h.clone(),
            head: self.head.clone(),
            critic: self.critic.clone(),
        });
        if let Some(t) = &mut self.targets {
            // copies carry no tape
            for net in [t.g.as_mut(), t.h.as_mut(), Some(&mut t.head), t.critic.as_mut()].into_iter().flatten() {
                net.zero_grad();
            }
        }
    }

    pub fn has_target(&self) -> bool {
        self.targets.is_some()
    }

    /// `[g(o), h(o)]` (or `[s, h(o)]` when the policy reads the true state).
    fn features_impl(&mut self, obs: &Tensor<f64>, states: &Tensor<f64>, record: bool) -> Result<Tensor<f64>> {
        let base = match self.input {
            Input::TrueState => self.read_states(states),
            Input::Predicted => {
                let rec = record && !self.frozen.g;
                let g = self.g.as_mut().ok_or_else(|| Error::Usage("no predictor in this mode".into()))?;
                run(g, obs, rec)?
            }
        };
        match self.h.as_mut() {
            Some(h) => {
                let z = run(h, obs, record && !self.frozen.h)?;
                Tensor::concat_cols(&base, &z)
            }
            None => Ok(base),
        }
    }

    pub fn features(&self, obs: &Tensor<f64>, states: &Tensor<f64>) -> Result<Tensor<f64>> {
        let base = match self.input {
            Input::TrueState => self.read_states(states),
            Input::Predicted => self
                .g
                .as_ref()
                .ok_or_else(|| Error::Usage("no predictor in this mode".into()))?
                .predict(obs)?,
        };
        match &self.h {
            Some(h) => Tensor::concat_cols(&base, &h.predict(obs)?),
            None => Ok(base),
        }
    }

    fn target_features(&self, obs: &Tensor<f64>, states: &Tensor<f64>) -> Result<Tensor<f64>> {
        let t = self.targets.as_ref().ok_or_else(|| Error::Usage("no target network".into()))?;
        let base = match self.input {
            Input::TrueState => self.read_states(states),
            Input::Predicted => t.g.as_ref().expect("target mirrors online").predict(obs)?,
        };
        match &t.h {
            Some(h) => Tensor::concat_cols(&base, &h.predict(obs)?),
            None => Ok(base),
        }
    }

    /// Sends `d_features` into `g` and `h`; `d_g_extra` is added to `g`'s share.
    fn backprop_features(&mut self, d_features: Option<&Tensor<f64>>, d_g_extra: Option<&Tensor<f64>>) -> Result<()> {
        let n = self.state_dim;
        let (dg, dz) = match d_features {
            Some(d) => {
                let (a, b) = d.split_cols(n)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let from_features = dg.filter(|_| self.input == Input::Predicted);
        let up = match (from_features, d_g_extra) {
            (Some(mut d), Some(extra)) => {
                d.add_scaled(extra, 1.0)?;
                Some(d)
            }
            (Some(d), None) => Some(d),
            (None, extra) => extra.cloned(),
        };
        if let (Some(g), Some(up)) = (self.g.as_mut().filter(|g| g.has_tape()), up) {
            g.backward(&up)?;
        }
        if let (Some(h), Some(dz)) = (self.h.as_mut(), dz) {
            if h.has_tape() {
                h.backward(&dz)?;
            }
        }
        Ok(())
    }

    /// `g(o)` in normalised units.
    pub fn predict_state(&self, obs: &Tensor<f64>) -> Result<Option<Tensor<f64>>> {
        self.g.as_ref().map(|g| g.predict(obs)).transpose()
    }

    fn obs_tensor(&self, obs: &[f64]) -> Result<Tensor<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.obs_shape);
        Tensor::new(shape, obs.to_vec())
    }

    /// Execution-time action. `state` is read only when the policy itself
    /// takes the true state as input.
    pub fn act(&self, obs: &[f64], state: &[f64], explore: Explore, rng: &mut ChaCha8Rng) -> Result<Decision> {
        let o = self.obs_tensor(obs)?;
        let s = if self.input == Input::TrueState {
            Tensor::row(self.scale.normalize(state))
        } else {
            Tensor::zeros(&[1, self.state_dim])
        };
        let feats = self.features(&o, &s)?;
        let predicted_state = match self.input {
            Input::Predicted => Some(feats.row_slice(0)[..self.state_dim].to_vec()),
            Input::TrueState => self.predict_state(&o)?.map(|t| t.into_data()),
        };
        let out = self.head.predict(&feats)?.into_data();
        let u: f64 = rng.gen();
        let decision = match (&self.action_space, self.algo) {
            (ActionSpace::Discrete(n), Algo::Ddqn) => {
                let a = match explore {
                    Explore::EpsilonGreedy(eps) if u < eps => rng.gen_range(0..*n),
                    _ => argmax(&out),
                };
                Decision {
                    action: Action::Discrete(a),
                    stored: Action::Discrete(a),
                    log_prob: None,
                    predicted_state,
                }
            }
            (ActionSpace::Discrete(_), Algo::Ppo) => {
                let a = match explore {
                    Explore::Sample => {
                        let probs = crate::nn::softmax(&out);
                        let mut acc = 0.0;
                        probs.iter().position(|p| {
                            acc += p;
                            u < acc
                        })
                        .unwrap_or(probs.len() - 1)
                    }
                    _ => argmax(&out),
                };
                Decision {
                    action: Action::Discrete(a),
                    stored: Action::Discrete(a),
                    log_prob: Some(categorical_log_prob(&out, a)),
                    predicted_state,
                }
            }
            (ActionSpace::Box { low, high }, _) => {
                let log_std = self.log_std.as_ref().expect("continuous head has log_std").value.data();
                let sample: Vec<f64> = match explore {
                    Explore::Sample => out
                        .iter()
                        .zip(log_std)
                        .map(|(&m, &ls)| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + ls.exp() * z
                        })
                        .collect(),
                    _ => out.clone(),
                };
                let env_action = sample
                    .iter()
                    .zip(low.iter().zip(high))
                    .map(|(&x, (&l, &h))| 0.5 * (l + h) + 0.5 * (h - l) * x.clamp(-1.0, 1.0))
                    .collect();
                Decision {
                    log_prob: Some(gaussian_log_prob(&sample, &out, log_std)),
                    action: Action::Continuous(env_action),
                    stored: Action::Continuous(sample),
                    predicted_state,
                }
            }
        };
        Ok(decision)
    }

    /// Double-DQN regression targets for a batch, from the frozen target copy.
    pub fn ddqn_targets(&self, batch: &Batch, gamma: f64) -> Result<Vec<f64>> {
        let online = self.head.predict(&self.features(&batch.next_obs, &batch.next_states)?)?;
        let t = self.targets.as_ref().ok_or_else(|| Error::Usage("no target network".into()))?;
        let evaluator = if self.mode == Mode::Asym {
            let s = self.read_states(&batch.next_states);
            t.critic.as_ref().expect("asymmetric DDQN has a state critic").predict(&s)?
        } else {
            t.head.predict(&self.target_features(&batch.next_obs, &batch.next_states)?)?
        };
        Ok((0..batch.len())
            .map(|i| {
                dqn_target(batch.rewards[i], batch.terminal[i], gamma, online.row_slice(i), evaluator.row_slice(i))
            })
            .collect())
    }

    fn state_term(&mut self, batch: &Batch, feats: &Tensor<f64>, weight: f64, backward: bool) -> Result<(f64, Option<Tensor<f64>>)> {
        let n = self.state_dim;
        let pred = match self.input {
            Input::Predicted => feats.split_cols(n)?.0,
            Input::TrueState => match self.g.as_mut() {
                Some(g) => run(g, &batch.obs, backward && weight > 0.0 && !self.frozen.g)?,
                None => return Ok((0.0, None)),
            },
        };
        let (loss, grad) = state_loss(pred.data(), batch.states.data());
        let trains_g = weight > 0.0 && !self.frozen.g && self.g.is_some();
        let d = if backward && trains_g {
            let mut t = Tensor::new(pred.shape().to_vec(), grad)?;
            t.scale(weight);
            Some(t)
        } else {
            None
        };
        Ok((loss, d))
    }

    /// Supervised-only pass over `g`.
    pub fn supervised_loss(&mut self, batch: &Batch, backward: bool) -> Result<LossReport> {
        let g = self.g.as_mut().ok_or_else(|| Error::Usage("no predictor in this mode".into()))?;
        let pred = run(g, &batch.obs, backward && !self.frozen.g)?;
        let (loss, grad) = state_loss(pred.data(), batch.states.data());
        if backward && !self.frozen.g {
            g.backward(&Tensor::new(pred.shape().to_vec(), grad)?)?;
        }
        Ok(LossReport {
            state: loss,
            composite: loss,
            ..Default::default()
        })
    }

    /// Critic TD loss (plus weighted state loss) against fixed `targets`.
    pub fn ddqn_loss(&mut self, batch: &Batch, targets: &[f64], w: LossWeights, backward: bool) -> Result<LossReport> {
        if backward && self.frozen.head && w.critic > 0.0 {
            return Err(Error::Usage("RL loss requested with a frozen Q-network".into()));
        }
        let feats = self.features_impl(&batch.obs, &batch.states, backward)?;
        let q = run(&mut self.head, &feats, backward && w.critic > 0.0)?;
        let (mut critic, dq) = squared_error(&pick(&q, &batch.actions)?, targets);
        let mut dcritic = None;
        if let Some(qs_net) = self.critic.as_mut() {
            let s = {
                self.state_reads.set(self.state_reads.get() + batch.len() as u64);
                batch.states.clone()
            };
            let qs = run(qs_net, &s, backward && w.critic > 0.0 && !self.frozen.critic)?;
            let (l, d) = squared_error(&pick(&qs, &batch.actions)?, targets);
            critic += l;
            dcritic = Some(scatter(qs.shape(), &batch.actions, &d.iter().map(|x| x * w.critic).collect::<Vec<_>>()));
        }
        let (state, d_state) = self.state_term(batch, &feats, w.state, backward)?;
        let rl = w.critic * critic;
        let composite = if w.state > 0.0 { rl + w.state * state } else { rl };
        if backward {
            let d_feats = if self.head.has_tape() {
                let up = scatter(q.shape(), &batch.actions, &dq.iter().map(|x| x * w.critic).collect::<Vec<_>>());
                Some(self.head.backward(&up)?)
            } else {
                None
            };
            self.backprop_features(d_feats.as_ref(), d_state.as_ref())?;
            if let (Some(net), Some(d)) = (self.critic.as_mut(), dcritic) {
                if net.has_tape() {
                    net.backward(&d)?;
                }
            }
        }
        Ok(LossReport {
            critic,
            actor: 0.0,
            entropy: 0.0,
            state,
            rl,
            composite,
        })
    }

    fn critic_input(&self, obs: &Tensor<f64>, states: &Tensor<f64>) -> Tensor<f64> {
        if self.critic_reads_state() {
            self.read_states(states)
        } else {
            obs.clone()
        }
    }

    /// `V(input)` for every row.
    pub fn values(&self, obs: &Tensor<f64>, states: &Tensor<f64>) -> Result<Vec<f64>> {
        let critic = self.critic.as_ref().ok_or_else(|| Error::Usage("no value network".into()))?;
        Ok(critic.predict(&self.critic_input(obs, states))?.into_data())
    }

    /// One-step advantages `r + gamma V(s') (1 - terminal) - V(s)` and the
    /// matching value targets, both held constant during the update.
    pub fn ppo_targets(&self, batch: &Batch, gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.values(&batch.obs, &batch.states)?;
        let v_next = self.values(&batch.next_obs, &batch.next_states)?;
        let mut adv = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let a = advantage(batch.rewards[i], batch.terminal[i], gamma, v[i], v_next[i]);
            adv.push(a);
            targets.push(a + v[i]);
        }
        Ok((adv, targets))
    }

    /// Clipped-surrogate actor loss, entropy bonus, value regression and
    /// weighted state loss.
    pub fn ppo_loss(
        &mut self,
        batch: &Batch,
        advantages: &[f64],
        value_targets: &[f64],
        eta: f64,
        w: LossWeights,
        backward: bool,
    ) -> Result<LossReport> {
        if backward && self.frozen.head && (w.actor > 0.0 || w.entropy > 0.0) {
            return Err(Error::Usage("actor loss requested with a frozen policy".into()));
        }
        let b = batch.len();
        let bf = b as f64;
        // critic
        let input = self.critic_input(&batch.obs, &batch.states);
        let train_critic = backward && w.critic > 0.0 && !self.frozen.critic;
        let critic_net = self.critic.as_mut().ok_or_else(|| Error::Usage("no value network".into()))?;
        let v = run(critic_net, &input, train_critic)?;
        let (critic, dv) = squared_error(v.data(), value_targets);
        // actor
        let feats = self.features_impl(&batch.obs, &batch.states, backward)?;
        let train_actor = backward && (w.actor > 0.0 || w.entropy > 0.0);
        let out = run(&mut self.head, &feats, train_actor)?;
        let width = out.row_len();
        let mut new_lp = Vec::with_capacity(b);
        let mut entropy = 0.0;
        let mut d_out = Tensor::zeros(out.shape());
        let mut d_log_std = vec![0.0; width];
        let log_std: Vec<f64> = self.log_std.as_ref().map(|p| p.value.data().to_vec()).unwrap_or_default();
        let mut lp_grads = Vec::with_capacity(b);
        for i in 0..b {
            let o = out.row_slice(i);
            match &batch.actions[i] {
                Action::Discrete(a) => {
                    new_lp.push(categorical_log_prob(o, *a));
                    entropy += categorical_entropy(o) / bf;
                    lp_grads.push((categorical_log_prob_grad(o, *a), Vec::new()));
                    if w.entropy > 0.0 {
                        for (d, g) in d_out.row_slice_mut(i).iter_mut().zip(categorical_entropy_grad(o)) {
                            *d -= w.entropy * g / bf;
                        }
                    }
                }
                Action::Continuous(a) => {
                    new_lp.push(gaussian_log_prob(a, o, &log_std));
                    entropy += gaussian_entropy(&log_std) / bf;
                    lp_grads.push(gaussian_log_prob_grad(a, o, &log_std));
                }
            }
        }
        if self.log_std.is_some() && w.entropy > 0.0 {
            d_log_std.iter_mut().for_each(|d| *d -= w.entropy);
        }
        let (actor, d_lp) = ppo_actor_loss(&new_lp, &batch.old_log_probs, advantages, eta);
        for (i, (dm, ds)) in lp_grads.iter().enumerate() {
            let scale = w.actor * d_lp[i];
            for (d, g) in d_out.row_slice_mut(i).iter_mut().zip(dm) {
                *d += scale * g;
            }
            for (d, g) in d_log_std.iter_mut().zip(ds) {
                *d += scale * g;
            }
        }
        let (state, d_state) = self.state_term(batch, &feats, w.state, backward)?;
        let rl = w.critic * critic + w.actor * actor - w.entropy * entropy;
        let composite = if w.state > 0.0 { rl + w.state * state } else { rl };
        if backward {
            if train_critic {
                let mut up = Tensor::new(v.shape().to_vec(), dv)?;
                up.scale(w.critic);
                self.critic.as_mut().expect("checked").backward(&up)?;
            }
            let d_feats = if self.head.has_tape() { Some(self.head.backward(&d_out)?) } else { None };
            self.backprop_features(d_feats.as_ref(), d_state.as_ref())?;
            if let (Some(p), true) = (self.log_std.as_mut(), train_actor && !self.frozen.head) {
                for (g, d) in p.grad.data_mut().iter_mut().zip(&d_log_std) {
                    *g += d;
                }
            }
        }
        Ok(LossReport {
            critic,
            actor,
            entropy,
            state,
            rl,
            composite,
        })
    }

    /// Checks the freeze contract, clips, and steps every trainable part.
    pub fn apply_gradients(&mut self, opts: &mut Optimizers, clip: Option<f64>) -> Result<f64> {
        let frozen = self.frozen;
        let checks = [
            (frozen.g, self.g.as_ref().map_or(true, |n| n.grads_are_zero()), "g"),
            (frozen.h, self.h.as_ref().map_or(true, |n| n.grads_are_zero()), "h"),
            (
                frozen.head,
                self.head.grads_are_zero()
                    && self.log_std.as_ref().map_or(true, |p| p.grad.data().iter().all(|&x| x == 0.0)),
                "policy head",
            ),
            (frozen.critic, self.critic.as_ref().map_or(true, |n| n.grads_are_zero()), "critic"),
        ];
        for (is_frozen, zero, name) in checks {
            if is_frozen && !zero {
                return Err(Error::Usage(format!("frozen {name} accumulated a nonzero gradient")));
            }
        }
        let mut norm = 0.0;
        if let Some(max) = clip {
            let mut ps = self.params_mut();
            norm = clip_grad_norm(&mut ps, max);
        }
        if let (Some(net), Some(o), false) = (self.g.as_mut(), opts.g.as_mut(), frozen.g) {
            o.step(net.params_mut())?;
        }
        if let (Some(net), Some(o), false) = (self.h.as_mut(), opts.h.as_mut(), frozen.h) {
            o.step(net.params_mut())?;
        }
        if !frozen.head {
            opts.head.step(self.head.params_mut())?;
            if let (Some(p), Some(o)) = (self.log_std.as_mut(), opts.log_std.as_mut()) {
                o.step(vec![p])?;
            }
        }
        if let (Some(net), Some(o), false) = (self.critic.as_mut(), opts.critic.as_mut(), frozen.critic) {
            o.step(net.params_mut())?;
        }
        Ok(norm)
    }

    pub fn checksums(&self) -> Checksums {
        let net = |n: Option<&Network<f64>>| n.map_or(0, |n| n.checksum());
        let target = self.targets.as_ref().map_or(0, |t| {
            [net(t.g.as_ref()), net(t.h.as_ref()), t.head.checksum(), net(t.critic.as_ref())]
                .iter()
                .fold(0xcbf2_9ce4_8422_2325u64, |h, x| (h ^ x).wrapping_mul(0x100_0000_01b3))
        });
        Checksums {
            g: net(self.g.as_ref()),
            h: net(self.h.as_ref()),
            head: self.head.checksum(),
            log_std: self.log_std.as_ref().map_or(0, |p| p.value.checksum()),
            critic: net(self.critic.as_ref()),
            target,
        }
    }

    /// Hash over every trainable parameter.
    pub fn checksum(&self) -> u64 {
        let c = self.checksums();
        [c.g, c.h, c.head, c.log_std, c.critic]
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, x| (h ^ x).wrapping_mul(0x100_0000_01b3))
    }

    pub fn optimizers(&self, cfg: &TrainConfig) -> Result<Optimizers> {
        let critic_lr = cfg.lr_critic.unwrap_or(cfg.lr);
        Ok(Optimizers {
            g: self.g.as_ref().map(|_| Optimizer::adam(cfg.lr)).transpose()?,
            h: self.h.as_ref().map(|_| Optimizer::adam(cfg.lr)).transpose()?,
            head: Optimizer::adam(cfg.lr)?,
            log_std: self.log_std.as_ref().map(|_| Optimizer::adam(cfg.lr)).transpose()?,
            critic: self.critic.as_ref().map(|_| Optimizer::adam(critic_lr)).transpose()?,
        })
    }
}

/// One Adam state per component so freezing one part never shifts another's
/// moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub g: Option<Optimizer<f64>>,
    pub h: Option<Optimizer<f64>>,
    pub head: Optimizer<f64>,
    pub log_std: Option<Optimizer<f64>>,
    pub critic: Option<Optimizer<f64>>,
}

impl Optimizers {
    pub fn set_lr(&mut self, lr: f64, critic_lr: f64) -> Result<()> {
        for o in [self.g.as_mut(), self.h.as_mut(), Some(&mut self.head), self.log_std.as_mut()].into_iter().flatten() {
            o.set_lr(lr)?;
        }
        if let Some(o) = self.critic.as_mut() {
            o.set_lr(critic_lr)?;
        }
        Ok(())
    }
}

impl Parameterized<f64> for PolicyBundle {
    fn params(&self) -> Vec<&Param<f64>> {
        let mut out = Vec::new();
        for net in [self.g.as_ref(), self.h.as_ref(), Some(&self.head)].into_iter().flatten() {
            out.extend(net.params());
        }
        out.extend(self.log_std.as_ref());
        if let Some(c) = &self.critic {
            out.extend(c.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out = Vec::new();
        for net in [self.g.as_mut(), self.h.as_mut(), Some(&mut self.head)].into_iter().flatten() {
            out.extend(net.params_mut());
        }
        out.extend(self.log_std.as_mut());
        if let Some(c) = self.critic.as_mut() {
            out.extend(c.params_mut());
        }
        out
    }
}

//! DDQN and PPO training loops, ablation schedules and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bundle::{Batch, Explore, Frozen, Input, LossWeights, Optimizers, PolicyBundle};
use super::config::{Algo, Mode, TrainConfig};
use super::losses::LossReport;
use super::replay::{ReplayBuffer, Transition};
use crate::envs::{EnvConfig, PomdpEnv};
use crate::error::{Error, Result};
use crate::nn::Parameterized;

const SEED_MASK: u64 = 0x3fff_ffff;
const EVAL_BIT: u64 = 1 << 62;
const HELD_OUT_BIT: u64 = 1 << 63;

/// Reset seed of training episode `episode`.
pub fn train_episode_seed(seed: u64, episode: u64) -> u64 {
    ((seed & SEED_MASK) << 32) | (episode & 0xffff_ffff)
}

/// Reset seed of evaluation episode `index`; disjoint from training seeds.
pub fn eval_episode_seed(seed: u64, index: u64) -> u64 {
    train_episode_seed(seed, index) | EVAL_BIT
}

/// Reset seed of held-out episode `index`; disjoint from both sets above.
pub fn held_out_seed(seed: u64, index: u64) -> u64 {
    train_episode_seed(seed, index) | HELD_OUT_BIT
}

/// Independent random stream `tag` derived from a run seed.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

pub const STREAM_INIT: u64 = 1;
pub const STREAM_ACTION: u64 = 2;
pub const STREAM_REPLAY: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

/// Outcome of one episode played by a fixed bundle.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub ret: f64,
    pub length: usize,
    /// Sum of squared normalised state errors over steps and coordinates.
    pub sq_err: f64,
    pub sq_err_raw: f64,
    /// `(g(o), normalised s)` per step, when requested.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Rollout {
    fn mse(&self, n: usize) -> (f64, f64) {
        let count = (self.length * n).max(1) as f64;
        (self.sq_err / count, self.sq_err_raw / count)
    }
}

/// Plays one episode without learning.
pub fn rollout(
    bundle: &PolicyBundle,
    env: &mut PomdpEnv,
    seed: u64,
    explore: Explore,
    rng: &mut ChaCha8Rng,
    keep_pairs: bool,
) -> Result<Rollout> {
    let (mut state, mut obs) = env.reset(seed);
    let mut out = Rollout::default();
    loop {
        let d = bundle.act(&obs, &state, explore, rng)?;
        track(&mut out, bundle, d.predicted_state.as_deref(), &state, keep_pairs);
        let step = env.step(&d.action)?;
        out.ret += step.reward;
        out.length += 1;
        if step.done {
            return Ok(out);
        }
        state = step.next_state;
        obs = step.next_observation;
    }
}

fn track(out: &mut Rollout, bundle: &PolicyBundle, pred: Option<&[f64]>, state: &[f64], keep: bool) {
    let Some(pred) = pred else { return };
    let s = bundle.scale.normalize(state);
    let raw = bundle.scale.denormalize(pred);
    out.sq_err += pred.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    out.sq_err_raw += raw.iter().zip(state).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    if keep {
        out.pairs.push((pred.to_vec(), s));
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub phase: u8,
    /// Exploration rate at the end of the episode (DDQN).
    pub epsilon: Option<f64>,
    pub ret: f64,
    pub length: usize,
    pub state_mse: f64,
    pub state_mse_raw: f64,
    /// Mean loss terms over the updates made during the episode.
    pub loss: LossReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub episode: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub state_mse: f64,
    pub state_mse_raw: f64,
}

/// Hooks called during training.
pub trait Observer {
    /// Called after every gradient step; returning `false` stops training.
    fn on_update(&mut self, _update: u64, _bundle: &PolicyBundle, _report: &LossReport) -> bool {
        true
    }

    fn on_episode(&mut self, _record: &EpisodeRecord) {}
}

impl Observer for () {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Rl,
    Supervised,
}

#[derive(Default)]
struct LossMean {
    sum: LossReport,
    count: usize,
}

impl LossMean {
    fn add(&mut self, r: &LossReport) {
        self.sum.critic += r.critic;
        self.sum.actor += r.actor;
        self.sum.entropy += r.entropy;
        self.sum.state += r.state;
        self.sum.rl += r.rl;
        self.sum.composite += r.composite;
        self.count += 1;
    }

    fn take(&mut self) -> LossReport {
        let c = self.count.max(1) as f64;
        let r = LossReport {
            critic: self.sum.critic / c,
            actor: self.sum.actor / c,
            entropy: self.sum.entropy / c,
            state: self.sum.state / c,
            rl: self.sum.rl / c,
            composite: self.sum.composite / c,
        };
        *self = LossMean::default();
        r
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: PolicyBundle,
    env: PomdpEnv,
    eval_env: PomdpEnv,
    opts: Optimizers,
    buffer: ReplayBuffer,
    action_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    records: Vec<EpisodeRecord>,
    evals: Vec<EvalRecord>,
    env_steps: u64,
    updates: u64,
    episodes: u64,
    phase: u8,
    phase_start: u64,
    stopped: bool,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env_cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let env = PomdpEnv::new(env_cfg)?;
        let eval_env = PomdpEnv::new(env_cfg)?;
        Self::with_envs(cfg, env, eval_env)
    }

    /// Uses caller-built environments (for custom dynamics).
    pub fn with_envs(cfg: TrainConfig, env: PomdpEnv, eval_env: PomdpEnv) -> Result<Self> {
        cfg.validate()?;
        let mut init = stream(cfg.seed, STREAM_INIT);
        let bundle = PolicyBundle::new(&cfg, &env.observation_shape(), env.state_scale().clone(), env.action_space(), &mut init)?;
        let opts = bundle.optimizers(&cfg)?;
        let mut t = Trainer {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            action_rng: stream(cfg.seed, STREAM_ACTION),
            replay_rng: stream(cfg.seed, STREAM_REPLAY),
            eval_rng: stream(cfg.seed, STREAM_EVAL),
            cfg,
            bundle,
            env,
            eval_env,
            opts,
            records: Vec::new(),
            evals: Vec::new(),
            env_steps: 0,
            updates: 0,
            episodes: 0,
            phase: 0,
            phase_start: 0,
            stopped: false,
        };
        t.enter_phase(if t.cfg.phase_one_steps() > 0 { 1 } else { 2 });
        Ok(t)
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn into_bundle(self) -> PolicyBundle {
        self.bundle
    }

    /// Phase 1 is the pretraining stage of an ablation; phase 2 is the main
    /// stage (and the only one for the other modes).
    fn enter_phase(&mut self, phase: u8) {
        self.phase = phase;
        self.phase_start = self.env_steps;
        let b = &mut self.bundle;
        match (self.cfg.mode, phase) {
            (Mode::ReprFirst, 1) => {
                b.frozen = Frozen { g: false, h: true, head: true, critic: true };
            }
            (Mode::ReprFirst, _) => {
                b.frozen = Frozen { g: true, ..Frozen::default() };
            }
            (Mode::PolicyFirst, 1) => {
                b.input = Input::TrueState;
                b.frozen = Frozen { g: true, ..Frozen::default() };
            }
            (Mode::PolicyFirst, _) => {
                b.input = Input::Predicted;
                b.frozen = Frozen { g: false, h: true, head: true, critic: true };
            }
            _ => {}
        }
        if self.cfg.algo == Algo::Ddqn && phase == 2 && self.cfg.mode == Mode::ReprFirst {
            self.bundle.sync_target();
        }
        self.buffer.clear();
    }

    fn role(&self) -> Role {
        match (self.cfg.mode, self.phase) {
            (Mode::ReprFirst, 1) | (Mode::PolicyFirst, 2) => Role::Supervised,
            _ => Role::Rl,
        }
    }

    fn explore(&self) -> Explore {
        match (self.cfg.algo, self.role()) {
            (Algo::Ddqn, Role::Supervised) if self.phase == 1 => Explore::EpsilonGreedy(1.0),
            (Algo::Ddqn, Role::Supervised) => Explore::EpsilonGreedy(self.cfg.epsilon_end),
            (Algo::Ddqn, Role::Rl) => {
                Explore::EpsilonGreedy(self.cfg.epsilon_at((self.env_steps - self.phase_start) as usize))
            }
            (Algo::Ppo, _) => Explore::Sample,
        }
    }

    fn total_steps(&self) -> u64 {
        self.cfg.env_steps as u64
    }

    fn maybe_advance_phase(&mut self) {
        if self.phase == 1 && self.env_steps >= self.cfg.phase_one_steps() as u64 {
            self.enter_phase(2);
        }
    }

    /// Trains until the step budget is spent or the observer stops it. On a
    /// non-finite loss the records gathered so far stay available.
    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<()> {
        if self.evals.is_empty() && self.env_steps == 0 && self.total_steps() > 0 {
            self.evaluate_now()?;
        }
        while self.env_steps < self.total_steps() && !self.stopped {
            match self.cfg.algo {
                Algo::Ddqn => self.ddqn_episode(observer)?,
                Algo::Ppo => self.ppo_iteration(observer)?,
            }
        }
        let last_eval = self.evals.last().map(|e| e.episode);
        if self.env_steps > 0 && last_eval != Some(self.episodes) {
            self.evaluate_now()?;
        }
        Ok(())
    }

    fn finish_episode(&mut self, ro: &Rollout, loss: LossReport, observer: &mut dyn Observer) -> Result<()> {
        self.episodes += 1;
        let (mse, raw) = ro.mse(self.bundle.state_dim);
        let rec = EpisodeRecord {
            episode: self.episodes,
            env_steps: self.env_steps,
            updates: self.updates,
            phase: self.phase,
            epsilon: match self.explore() {
                Explore::EpsilonGreedy(e) => Some(e),
                _ => None,
            },
            ret: ro.ret,
            length: ro.length,
            state_mse: mse,
            state_mse_raw: raw,
            loss,
        };
        observer.on_episode(&rec);
        self.records.push(rec);
        if self.episodes % self.cfg.eval_every as u64 == 0 {
            self.evaluate_now()?;
        }
        Ok(())
    }

    /// Greedy (mean-action) evaluation on the fixed evaluation seeds.
    pub fn evaluate_now(&mut self) -> Result<EvalRecord> {
        let n = self.cfg.eval_episodes.max(1);
        let mut returns = Vec::with_capacity(n);
        let mut mse = 0.0;
        let mut raw = 0.0;
        for i in 0..n {
            let seed = eval_episode_seed(self.cfg.seed, i as u64);
            let ro = rollout(&self.bundle, &mut self.eval_env, seed, Explore::Greedy, &mut self.eval_rng, false)?;
            let (m, r) = ro.mse(self.bundle.state_dim);
            mse += m / n as f64;
            raw += r / n as f64;
            returns.push(ro.ret);
        }
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
        let rec = EvalRecord {
            episode: self.episodes,
            env_steps: self.env_steps,
            updates: self.updates,
            mean_return: mean,
            std_return: var.sqrt(),
            state_mse: mse,
            state_mse_raw: raw,
        };
        self.evals.push(rec.clone());
        Ok(rec)
    }

    fn check(&self, report: &LossReport) -> Result<()> {
        let params_ok = self.bundle.params().iter().all(|p| p.value.all_finite());
        if report.is_finite() && params_ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "training diverged at update {} (env step {}, phase {}): {:?}",
                self.updates, self.env_steps, self.phase, report
            )))
        }
    }

    fn after_update(&mut self, report: &LossReport, observer: &mut dyn Observer) {
        self.updates += 1;
        if !observer.on_update(self.updates, &self.bundle, report) {
            self.stopped = true;
        }
    }

    fn ddqn_update(&mut self, observer: &mut dyn Observer) -> Result<LossReport> {
        let picked = self.buffer.sample(self.cfg.batch_size, &mut self.replay_rng);
        let batch = Batch::new(&picked, &self.bundle.obs_shape, &self.bundle.scale)?;
        let report = match self.role() {
            Role::Rl => {
                let targets = self.bundle.ddqn_targets(&batch, self.cfg.gamma)?;
                self.bundle.ddqn_loss(&batch, &targets, LossWeights::from_config(&self.cfg), true)?
            }
            Role::Supervised => self.bundle.supervised_loss(&batch, true)?,
        };
        self.check(&report)?;
        self.bundle.apply_gradients(&mut self.opts, self.cfg.grad_clip)?;
        self.check(&report)?;
        self.after_update(&report, observer);
        Ok(report)
    }

    fn ddqn_episode(&mut self, observer: &mut dyn Observer) -> Result<()> {
        let seed = train_episode_seed(self.cfg.seed, self.episodes);
        let (mut state, mut obs) = self.env.reset(seed);
        let mut ro = Rollout::default();
        let mut losses = LossMean::default();
        let warmup = self.cfg.batch_size.max(self.cfg.learning_starts);
        loop {
            let d = self.bundle.act(&obs, &state, self.explore(), &mut self.action_rng)?;
            track(&mut ro, &self.bundle, d.predicted_state.as_deref(), &state, false);
            let step = self.env.step(&d.action)?;
            ro.ret += step.reward;
            ro.length += 1;
            let terminal = step.terminal();
            self.buffer.push(Transition {
                state: std::mem::take(&mut state),
                observation: std::mem::take(&mut obs),
                action: d.stored,
                reward: step.reward,
                next_state: step.next_state.clone(),
                next_observation: step.next_observation.clone(),
                done: step.done,
                terminal,
                log_prob: None,
            });
            self.env_steps += 1;
            if self.env_steps % self.cfg.train_every as u64 == 0 && self.buffer.len() >= warmup {
                let r = self.ddqn_update(observer)?;
                losses.add(&r);
            }
            if self.role() == Role::Rl && self.env_steps % self.cfg.target_sync as u64 == 0 {
                self.bundle.sync_target();
            }
            let budget_spent = self.env_steps >= self.total_steps() || self.stopped;
            if step.done || budget_spent {
                break;
            }
            let phase_before = self.phase;
            self.maybe_advance_phase();
            if self.phase != phase_before {
                break;
            }
            state = step.next_state;
            obs = step.next_observation;
        }
        self.maybe_advance_phase();
        self.decay_lr()?;
        self.finish_episode(&ro, losses.take(), observer)
    }

    /// Linear decay towards zero over the step budget, when enabled.
    fn decay_lr(&mut self) -> Result<()> {
        if self.cfg.lr_decay {
            let frac = (1.0 - self.env_steps as f64 / self.total_steps() as f64).max(1e-3);
            let critic_lr = self.cfg.lr_critic.unwrap_or(self.cfg.lr);
            self.opts.set_lr(self.cfg.lr * frac, critic_lr * frac)?;
        }
        Ok(())
    }

    fn ppo_iteration(&mut self, observer: &mut dyn Observer) -> Result<()> {
        let mut rollout_buf = Vec::new();
        for _ in 0..self.cfg.episodes_per_update {
            if self.env_steps >= self.total_steps() {
                break;
            }
            let seed = train_episode_seed(self.cfg.seed, self.episodes);
            let (mut state, mut obs) = self.env.reset(seed);
            let mut ro = Rollout::default();
            loop {
                let d = self.bundle.act(&obs, &state, Explore::Sample, &mut self.action_rng)?;
                track(&mut ro, &self.bundle, d.predicted_state.as_deref(), &state, false);
                let step = self.env.step(&d.action)?;
                ro.ret += step.reward;
                ro.length += 1;
                self.env_steps += 1;
                let terminal = step.terminal();
                rollout_buf.push(Transition {
                    state: std::mem::take(&mut state),
                    observation: std::mem::take(&mut obs),
                    action: d.stored,
                    reward: step.reward,
                    next_state: step.next_state.clone(),
                    next_observation: step.next_observation.clone(),
                    done: step.done,
                    terminal,
                    log_prob: d.log_prob,
                });
                if step.done || self.env_steps >= self.total_steps() {
                    break;
                }
                state = step.next_state;
                obs = step.next_observation;
            }
            self.finish_episode(&ro, LossReport::default(), observer)?;
        }
        if rollout_buf.is_empty() {
            return Ok(());
        }
        let report = self.ppo_update(&rollout_buf, observer)?;
        if let Some(rec) = self.records.last_mut() {
            rec.loss = report;
        }
        self.decay_lr()?;
        self.maybe_advance_phase();
        Ok(())
    }

    fn ppo_update(&mut self, data: &[Transition], observer: &mut dyn Observer) -> Result<LossReport> {
        let refs: Vec<&Transition> = data.iter().collect();
        let all = Batch::new(&refs, &self.bundle.obs_shape, &self.bundle.scale)?;
        let role = self.role();
        let (mut adv, targets) = match role {
            Role::Rl => self.bundle.ppo_targets(&all, self.cfg.gamma)?,
            Role::Supervised => (vec![0.0; data.len()], vec![0.0; data.len()]),
        };
        if self.cfg.normalize_advantages && adv.len() > 1 {
            normalize(&mut adv);
        }
        let weights = LossWeights::from_config(&self.cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut losses = LossMean::default();
        'epochs: for _ in 0..self.cfg.ppo_epochs {
            order.shuffle(&mut self.replay_rng);
            for chunk in order.chunks(self.cfg.ppo_minibatch) {
                let picked: Vec<&Transition> = chunk.iter().map(|&i| &data[i]).collect();
                let batch = Batch::new(&picked, &self.bundle.obs_shape, &self.bundle.scale)?;
                let report = match role {
                    Role::Rl => {
                        let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                        let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                        self.bundle.ppo_loss(&batch, &a, &t, self.cfg.eta, weights, true)?
                    }
                    Role::Supervised => self.bundle.supervised_loss(&batch, true)?,
                };
                self.check(&report)?;
                self.bundle.apply_gradients(&mut self.opts, self.cfg.grad_clip)?;
                self.check(&report)?;
                losses.add(&report);
                self.after_update(&report, observer);
                if self.stopped {
                    break 'epochs;
                }
            }
        }
        Ok(losses.take())
    }
}

/// Shifts and scales to zero mean and unit (population) deviation.
pub fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = (*x - mean) / (sd + 1e-8);
    }
}

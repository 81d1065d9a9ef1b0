use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::audit::{audit_loss, fixture, AuditLoss, AUDIT_TOLERANCE};
use super::losses::*;
use super::trainer::{held_out_seed, train_episode_seed, eval_episode_seed};
use super::*;
use crate::envs::{Action, EnvConfig, EnvKind, ObsKind, PomdpEnv, TabularDynamics};
use crate::nn::{LayerSpec, Network, Parameterized};
use crate::theory::{policy_evaluation, uniform_policy, value_iteration, TabularMdp};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Tabular env on the identity lift; one frame per observation.
fn tabular_env(t: &[f64], r: &[f64], embedding: Vec<Vec<f64>>, actions: usize, cap: usize) -> PomdpEnv {
    let s = embedding.len();
    let d = TabularDynamics::new(t.to_vec(), r.to_vec(), embedding, vec![1.0 / s as f64; s], actions, cap).unwrap();
    let c = EnvConfig {
        name: EnvKind::Tabular,
        obs: ObsKind::Identity,
        frame_stack: 1,
        ..Default::default()
    };
    PomdpEnv::from_dynamics(EnvKind::Tabular, Box::new(d), &c).unwrap()
}

fn cartpole_identity() -> EnvConfig {
    EnvConfig {
        frame_stack: 1,
        ..EnvConfig::new(EnvKind::CartPole, ObsKind::Identity)
    }
}

fn cartpole_projection() -> EnvConfig {
    EnvConfig {
        projection_dim: 12,
        ..EnvConfig::new(EnvKind::CartPole, ObsKind::Projection)
    }
}

fn small(cfg: TrainConfig) -> TrainConfig {
    TrainConfig {
        hidden: 16,
        predictor_hidden: 16,
        learning_starts: 64,
        batch_size: 16,
        train_every: 1,
        ..cfg
    }
}

/// Collects the bundle checksum after every update, stopping after `limit`.
struct Trace {
    limit: u64,
    sums: Vec<u64>,
    parts: Vec<bundle::Checksums>,
}

impl Trace {
    fn new(limit: u64) -> Self {
        Trace { limit, sums: Vec::new(), parts: Vec::new() }
    }
}

impl Observer for Trace {
    fn on_update(&mut self, update: u64, bundle: &PolicyBundle, _: &LossReport) -> bool {
        self.sums.push(bundle.checksum());
        self.parts.push(bundle.checksums());
        update < self.limit
    }
}

fn trace(cfg: TrainConfig, env: &EnvConfig, limit: u64) -> Trace {
    let mut t = Trace::new(limit);
    let mut tr = Trainer::new(cfg, env).unwrap();
    tr.run(&mut t).unwrap();
    assert_eq!(t.sums.len() as u64, limit, "run ended before {limit} updates");
    t
}

// ---- loss pieces ----

#[test]
fn dqn_target_examples() {
    assert_eq!(dqn_target(1.0, true, 0.99, &[5.0, 7.0], &[3.0, 2.0]), 1.0);
    assert_eq!(dqn_target(0.5, false, 0.0, &[5.0, 7.0], &[3.0, 2.0]), 0.5);
    // online picks action 1, the target network values it
    assert_eq!(dqn_target(1.0, false, 0.5, &[5.0, 7.0], &[3.0, 2.0]), 2.0);
}

#[test]
fn iterated_target_regression_reaches_optimal_q() {
    // s0: a0 stays (r=0), a1 moves to s1 (r=1); s1: a0 moves to s0 (r=2), a1 stays (r=0.5)
    let t = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let r = [0.0, 1.0, 2.0, 0.5];
    let gamma = 0.9;
    let mut q = [0.0f64; 4];
    for _ in 0..400 {
        let prev = q;
        for s in 0..2 {
            for a in 0..2 {
                let next = if t[(s * 2 + a) * 2] == 1.0 { 0 } else { 1 };
                let nq = &prev[next * 2..next * 2 + 2];
                q[s * 2 + a] = dqn_target(r[s * 2 + a], false, gamma, nq, nq);
            }
        }
    }
    let mdp = TabularMdp::new(2, 2, t.to_vec(), r.to_vec(), gamma, vec![vec![0.0], vec![1.0]]).unwrap();
    let vt = value_iteration(&mdp, 1e-13).unwrap();
    for i in 0..4 {
        assert!(close(q[i], vt.q[i], 1e-6), "{i}: {} vs {}", q[i], vt.q[i]);
    }
}

#[test]
fn critic_loss_examples() {
    assert_eq!(squared_error(&[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
    assert_eq!(squared_error(&[1.0], &[3.0]).0, 4.0);
}

#[test]
fn advantage_examples() {
    assert_eq!(advantage(1.0, true, 0.9, 0.25, 100.0), 0.75);
    assert_eq!(advantage(1.0, false, 0.0, 0.25, 100.0), 0.75);
    assert!(close(advantage(1.0, false, 0.5, 0.25, 2.0), 1.75, 1e-15));
}

#[test]
fn advantage_under_exact_values_has_zero_mean() {
    // 3-state chain, 2 actions: a0 steps left, a1 steps right (slipping 20%)
    let mut t = vec![0.0; 3 * 2 * 3];
    for s in 0..3usize {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(2);
        t[(s * 2) * 3 + left] += 0.8;
        t[(s * 2) * 3 + right] += 0.2;
        t[(s * 2 + 1) * 3 + right] += 0.8;
        t[(s * 2 + 1) * 3 + left] += 0.2;
    }
    let r = vec![0.0, 0.1, 0.2, -0.3, 1.0, 0.4];
    let gamma = 0.9;
    let mdp = TabularMdp::new(3, 2, t.clone(), r.clone(), gamma, vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    let v = policy_evaluation(&mdp, &uniform_policy(3, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let s = rng.gen_range(0..3);
        let a = rng.gen_range(0..2);
        let u: f64 = rng.gen();
        let row = &t[(s * 2 + a) * 3..(s * 2 + a) * 3 + 3];
        let mut acc = 0.0;
        let next = row.iter().position(|p| {
            acc += p;
            u < acc
        }).unwrap_or(2);
        sum += advantage(r[s * 2 + a], false, gamma, v[s], v[next]);
    }
    let mean = sum / n as f64;
    assert!(mean.abs() < 1e-2, "mean advantage {mean}");
}

#[test]
fn ppo_actor_loss_examples() {
    let adv = [0.5, -1.0, 2.0];
    let lp = [-0.3, -1.2, -0.7];
    let (loss, _) = ppo_actor_loss(&lp, &lp, &adv, 0.2);
    assert!(close(loss, -(0.5 - 1.0 + 2.0) / 3.0, 1e-15));
    let two = 2f64.ln();
    assert!(close(ppo_actor_loss(&[two], &[0.0], &[1.0], 0.2).0, -1.2, 1e-12));
    let half = 0.5f64.ln();
    assert!(close(ppo_actor_loss(&[half], &[0.0], &[-1.0], 0.2).0, 0.8, 1e-12));
}

#[test]
fn ppo_actor_gradient_matches_differences() {
    let old = [0.0, 0.1, -0.2, 0.05];
    let adv = [1.0, -0.5, 0.7, -2.0];
    let new = [0.3, -0.4, 0.02, 0.1];
    let (_, g) = ppo_actor_loss(&new, &old, &adv, 0.2);
    for i in 0..4 {
        let mut p = new;
        let mut m = new;
        p[i] += 1e-6;
        m[i] -= 1e-6;
        let fd = (ppo_actor_loss(&p, &old, &adv, 0.2).0 - ppo_actor_loss(&m, &old, &adv, 0.2).0) / 2e-6;
        assert!(close(g[i], fd, 1e-8), "{i}: {} vs {fd}", g[i]);
    }
}

proptest! {
    #[test]
    fn ppo_surrogate_is_pessimistic(ratio in 0.0f64..5.0, adv in -10.0f64..10.0, eta in 0.01f64..0.99) {
        prop_assert!(ppo_surrogate(ratio, adv, eta) <= ratio * adv);
    }

    #[test]
    fn state_loss_is_nonnegative(xs in prop::collection::vec(-1.0f64..1.0, 1..20), shift in -1.0f64..1.0) {
        let ys: Vec<f64> = xs.iter().map(|x| x * 0.5 + shift).collect();
        prop_assert!(state_loss(&xs, &ys).0 >= 0.0);
    }

    #[test]
    fn categorical_entropy_is_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 1..6)) {
        prop_assert!(categorical_entropy(&logits) >= -1e-12);
    }
}

#[test]
fn uniform_policy_entropy_is_log_actions() {
    for n in [2usize, 3, 5] {
        assert!(close(categorical_entropy(&vec![0.3; n]), (n as f64).ln(), 1e-12));
    }
    // a PPO bundle with a zeroed output layer is uniform on every input
    let mut f = fixture(Algo::Ppo, Mode::Psrl, EnvKind::Acrobot, 0, 1).unwrap();
    let last = f.bundle.head.specs().len() - 1;
    let (w, b) = f.bundle.head.layer_params_mut(last).unwrap();
    w.value.fill(0.0);
    b.value.fill(0.0);
    let rep = f.bundle.ppo_loss(&f.batch, &f.advantages, &f.value_targets, 0.2, LossWeights { critic: 1.0, actor: 1.0, entropy: 1.0, state: 0.0 }, false).unwrap();
    assert!(close(rep.entropy, 3f64.ln(), 1e-12));
}

#[test]
fn state_loss_examples() {
    assert_eq!(state_loss(&[0.1, -0.2, 0.3, 0.4], &[0.1, -0.2, 0.3, 0.4]).0, 0.0);
    // zero predictor: mean over dimensions of the second moment
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let moment: f64 = s.chunks(4).map(|row| row.iter().map(|x| x * x).sum::<f64>() / 4.0).sum::<f64>() / 100.0;
    assert!(close(state_loss(&vec![0.0; 400], &s).0, moment, 1e-12));
}

#[test]
fn supervised_steps_overfit_one_batch() {
    let mut f = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 0, 2).unwrap();
    let cfg = TrainConfig::default();
    let mut opts = f.bundle.optimizers(&cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..100 {
        losses.push(f.bundle.supervised_loss(&f.batch, true).unwrap().state);
        f.bundle.apply_gradients(&mut opts, None).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses[99] < losses[0]);
}

#[test]
fn composite_adds_weighted_state_loss() {
    let mut f = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 2, 3).unwrap();
    let w = LossWeights { critic: 1.0, actor: 0.0, entropy: 0.0, state: 4.0 };
    let rep = f.bundle.ddqn_loss(&f.batch, &f.q_targets, w, false).unwrap();
    assert_eq!(rep.rl, rep.critic);
    assert!(close(rep.composite, rep.critic + 4.0 * rep.state, 1e-12));
    let w0 = LossWeights { state: 0.0, ..w };
    let rep0 = f.bundle.ddqn_loss(&f.batch, &f.q_targets, w0, false).unwrap();
    assert_eq!(rep0.composite, rep0.rl);
    assert_eq!((rep0.actor, rep0.entropy), (0.0, 0.0));
}

#[test]
fn rl_loss_alone_trains_the_predictor() {
    let mut f = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 0, 4).unwrap();
    f.bundle.zero_grad();
    let w = LossWeights { critic: 1.0, actor: 0.0, entropy: 0.0, state: 0.0 };
    f.bundle.ddqn_loss(&f.batch, &f.q_targets, w, true).unwrap();
    assert!(!f.bundle.g.as_ref().unwrap().grads_are_zero());
}

#[test]
fn gradient_audit_passes_for_every_loss() {
    for which in AuditLoss::ALL {
        let r = audit_loss(which, 11).unwrap();
        assert!(r.pass && r.max_rel_error <= AUDIT_TOLERANCE, "{}: {r:?}", which.as_str());
    }
}

// ---- composition ----

#[test]
fn policy_input_width_is_n_plus_k() {
    for k in [0usize, 2, 20] {
        let f = fixture(Algo::Ppo, Mode::Psrl, EnvKind::CartPole, k, 0).unwrap();
        assert_eq!(f.bundle.head.input_len(), 4 + k);
        assert_eq!(f.bundle.h.is_some(), k > 0);
    }
    let f = fixture(Algo::Ddqn, Mode::TrueState, EnvKind::Acrobot, 3, 0).unwrap();
    assert!(f.bundle.g.is_none() && f.bundle.h.is_none());
    assert_eq!(f.bundle.head.input_len(), 6);
}

#[test]
fn latent_encoder_cannot_move_actions_when_k_is_zero() {
    let mut with = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 2, 6).unwrap().bundle;
    let without = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 0, 6).unwrap().bundle;
    assert_eq!(without.params().len(), without.g.as_ref().unwrap().params().len() + without.head.params().len());
    // K>0: scrambling h changes Q-values; K=0 has nothing to scramble
    let obs = vec![0.1; with.obs_shape.iter().product()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let before = with.head.predict(&with.features(&crate::nn::Tensor::row(obs.clone()), &crate::nn::Tensor::zeros(&[1, 4])).unwrap()).unwrap();
    for p in with.h.as_mut().unwrap().params_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
    }
    let after = with.head.predict(&with.features(&crate::nn::Tensor::row(obs), &crate::nn::Tensor::zeros(&[1, 4])).unwrap()).unwrap();
    assert_ne!(before.data(), after.data());
    assert!(without.h.is_none());
}

#[test]
fn greedy_ddqn_action_is_argmax() {
    let f = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::Acrobot, 2, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..f.batch.len() {
        let obs = f.batch.obs.row_slice(i).to_vec();
        let q = f.bundle.head.predict(&f.bundle.features(&crate::nn::Tensor::row(obs.clone()), &crate::nn::Tensor::zeros(&[1, 6])).unwrap()).unwrap();
        let d = f.bundle.act(&obs, &[0.0; 6], Explore::EpsilonGreedy(0.0), &mut rng).unwrap();
        assert_eq!(d.action, Action::Discrete(argmax(q.data())));
    }
}

/// `Dense(n, n)` computing the affine map onto normalised coordinates.
fn normaliser(scale: &crate::envs::StateScale) -> Network<f64> {
    let n = scale.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::new(&[n], &[LayerSpec::Dense { inputs: n, outputs: n }], &mut rng).unwrap();
    let (w, b) = net.layer_params_mut(0).unwrap();
    w.value.fill(0.0);
    for i in 0..n {
        let half = 0.5 * (scale.high[i] - scale.low[i]);
        let mid = 0.5 * (scale.high[i] + scale.low[i]);
        w.value.data_mut()[i * n + i] = 1.0 / half;
        b.value.data_mut()[i] = -mid / half;
    }
    net
}

#[test]
fn identity_predictor_reproduces_true_state_actions() {
    let env_cfg = cartpole_identity();
    let mut env = PomdpEnv::new(&env_cfg).unwrap();
    let make = |mode| {
        let cfg = TrainConfig { mode, ..Default::default() };
        PolicyBundle::new(&cfg, &env.observation_shape(), env.state_scale().clone(), env.action_space(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    };
    let truth = make(Mode::TrueState);
    let mut composed = make(Mode::Psrl);
    composed.head = truth.head.clone();
    composed.g = Some(normaliser(env.state_scale()));
    composed.frozen.g = true;
    let mut ra = ChaCha8Rng::seed_from_u64(2);
    let mut rb = ChaCha8Rng::seed_from_u64(2);
    let mut steps = 0;
    for ep in 0..5 {
        let (mut s, mut o) = env.reset(ep);
        loop {
            let a = truth.act(&o, &s, Explore::EpsilonGreedy(0.1), &mut ra).unwrap();
            let b = composed.act(&o, &s, Explore::EpsilonGreedy(0.1), &mut rb).unwrap();
            assert_eq!(a.action, b.action);
            steps += 1;
            let r = env.step(&a.action).unwrap();
            if r.done {
                break;
            }
            (s, o) = (r.next_state, r.next_observation);
        }
    }
    assert!(steps > 20);
    assert_eq!(composed.state_reads(), 0);
}

// ---- reductions and determinism ----

#[test]
fn zero_beta_matches_end_to_end_bit_for_bit() {
    let env = cartpole_projection();
    for algo in [Algo::Ddqn, Algo::Ppo] {
        let base = small(TrainConfig { algo, k: 2, seed: 9, ppo_minibatch: 16, ppo_epochs: 2, ..Default::default() });
        let psrl = trace(TrainConfig { mode: Mode::Psrl, beta: 0.0, ..base.clone() }, &env, 100);
        let e2e = trace(TrainConfig { mode: Mode::E2e, beta: 1.0, ..base.clone() }, &env, 100);
        assert_eq!(psrl.sums, e2e.sums, "{algo}");
        let supervised = trace(TrainConfig { mode: Mode::Psrl, beta: 1.0, ..base }, &env, 100);
        assert_ne!(psrl.sums, supervised.sums, "{algo}");
    }
}

#[test]
fn zero_width_latent_is_plain_psrl() {
    let env = cartpole_projection();
    let plain = trace(small(TrainConfig { seed: 4, ..Default::default() }), &env, 100);
    let k0 = trace(small(TrainConfig { k: 0, beta: 1.0, seed: 4, ..Default::default() }), &env, 100);
    assert_eq!(plain.sums, k0.sums);
    assert!(k0.parts.iter().all(|c| c.h == 0));
}

#[test]
fn identical_seeds_give_identical_records() {
    let cfg = small(TrainConfig { env_steps: 3000, eval_every: 5, seed: 12, ..Default::default() });
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &cartpole_projection()).unwrap();
        t.run(&mut ()).unwrap();
        (serde_json::to_string(t.records()).unwrap(), serde_json::to_string(t.evals()).unwrap(), t.bundle.checksum())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_steps_returns_the_initial_bundle() {
    let cfg = TrainConfig { env_steps: 0, seed: 5, ..Default::default() };
    let mut t = Trainer::new(cfg.clone(), &cartpole_projection()).unwrap();
    let before = t.bundle.checksum();
    t.run(&mut ()).unwrap();
    assert!(t.records().is_empty() && t.evals().is_empty());
    assert_eq!(t.bundle.checksum(), before);
}

#[test]
fn target_network_only_changes_at_sync() {
    let env = cartpole_projection();
    let frozen = trace(small(TrainConfig { target_sync: 1_000_000, seed: 2, ..Default::default() }), &env, 200);
    assert!(frozen.parts.windows(2).all(|w| w[0].target == w[1].target));
    assert!(frozen.parts.windows(2).any(|w| w[0].head != w[1].head));
    // train_every = 1 so one update per step; sync every 50 steps
    let synced = trace(small(TrainConfig { target_sync: 50, seed: 2, ..Default::default() }), &env, 200);
    let changes = synced.parts.windows(2).filter(|w| w[0].target != w[1].target).count();
    assert!((3..=4).contains(&changes), "{changes} target changes");
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(100);
    let t = Transition {
        state: vec![0.0],
        observation: vec![0.0],
        action: Action::Discrete(0),
        reward: 0.0,
        next_state: vec![0.0],
        next_observation: vec![0.0],
        done: false,
        terminal: false,
        log_prob: None,
    };
    for _ in 0..150 {
        buf.push(t.clone());
    }
    assert_eq!(buf.len(), 100);
    let mut counts = vec![0usize; 100];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        for i in buf.sample_indices(100, &mut rng) {
            counts[i] += 1;
        }
    }
    let sigma = (1e6f64 * 0.01 * 0.99).sqrt();
    let z: Vec<f64> = counts.iter().map(|&c| (c as f64 - 1e4).abs() / sigma).collect();
    // each item leaves the 3-sigma band with probability 0.0027, so across 100
    // items a stray one is expected; three or more has probability ~2e-4
    let outside = z.iter().filter(|&&x| x > 3.0).count();
    assert!(outside <= 2, "{outside} items outside 3 sigma: {counts:?}");
    assert!(z.iter().all(|&x| x < 4.5), "{z:?}");
    // chi-square with 99 degrees of freedom; 99.9th percentile is about 149
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1e4).powi(2) / 1e4).sum();
    assert!(chi2 < 149.0, "chi2 {chi2}");
}

#[test]
fn entropy_bonus_keeps_the_bandit_policy_broad() {
    // one state, three arms
    let make = |alpha2: f64| {
        let env = || tabular_env(&[1.0; 3], &[1.0, 0.5, 0.0], vec![vec![0.0]], 3, 1);
        let cfg = TrainConfig {
            algo: Algo::Ppo,
            mode: Mode::TrueState,
            alpha2,
            gamma: 0.0,
            episodes_per_update: 16,
            ppo_minibatch: 16,
            ppo_epochs: 4,
            hidden: 16,
            lr: 3e-3,
            normalize_advantages: false,
            env_steps: 1_000_000,
            seed: 3,
            ..Default::default()
        };
        let mut t = Trainer::with_envs(cfg, env(), env()).unwrap();
        t.run(&mut Trace::new(1000)).unwrap();
        let logits = t.bundle.head.predict(&crate::nn::Tensor::row(vec![0.0])).unwrap().into_data();
        categorical_entropy(&logits)
    };
    let plain = make(0.0);
    let bonus = make(0.5);
    assert!(bonus > plain, "{bonus} vs {plain}");
}

// ---- asymmetric critic ----

#[test]
fn execution_never_reads_the_state_under_asymmetric_critic() {
    for algo in [Algo::Ddqn, Algo::Ppo] {
        let f = fixture(algo, Mode::Asym, EnvKind::CartPole, 2, 1).unwrap();
        let mut env = PomdpEnv::new(&cartpole_projection()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bundle = PolicyBundle::new(
            &TrainConfig { algo, mode: Mode::Asym, k: 2, ..Default::default() },
            &env.observation_shape(),
            env.state_scale().clone(),
            env.action_space(),
            &mut rng,
        )
        .unwrap();
        for explore in [Explore::Greedy, Explore::Sample, Explore::EpsilonGreedy(0.3)] {
            rollout(&bundle, &mut env, 1, explore, &mut rng, false).unwrap();
        }
        assert_eq!(bundle.state_reads(), 0);
        // training does read it
        let mut b = f.bundle.clone();
        let before = b.state_reads();
        match algo {
            Algo::Ddqn => {
                b.ddqn_loss(&f.batch, &f.q_targets, LossWeights { critic: 1.0, actor: 0.0, entropy: 0.0, state: 0.0 }, false).unwrap();
            }
            Algo::Ppo => {
                b.ppo_targets(&f.batch, 0.99).unwrap();
            }
        }
        assert!(b.state_reads() > before);
    }
}

#[test]
fn value_loss_leaves_predictor_gradient_exactly_zero() {
    let mut f = fixture(Algo::Ppo, Mode::Asym, EnvKind::Pendulum, 2, 5).unwrap();
    f.bundle.zero_grad();
    let w = LossWeights { critic: 1.0, actor: 0.0, entropy: 0.0, state: 0.0 };
    f.bundle.ppo_loss(&f.batch, &f.advantages, &f.value_targets, 0.2, w, true).unwrap();
    assert!(f.bundle.g.as_ref().unwrap().grads_are_zero());
    assert!(f.bundle.h.as_ref().unwrap().grads_are_zero());
    assert!(!f.bundle.critic.as_ref().unwrap().grads_are_zero());
}

#[test]
fn asymmetric_and_symmetric_critics_coincide_on_identity_observations() {
    // embedding spans [-1, 1], so normalised state and observation agree
    let t = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let r = [0.0, 1.0, 0.5, -1.0, 0.2, 0.0];
    let emb = vec![vec![-1.0], vec![1.0]];
    let t2: Vec<f64> = t[..8].to_vec();
    let r2: Vec<f64> = r[..4].to_vec();
    let run = |mode| {
        let env = || tabular_env(&t2, &r2, emb.clone(), 2, 20);
        let cfg = TrainConfig {
            algo: Algo::Ppo,
            mode,
            env_steps: 2000,
            ppo_minibatch: 32,
            ppo_epochs: 2,
            hidden: 8,
            predictor_hidden: 8,
            seed: 7,
            ..Default::default()
        };
        let mut tr = Trainer::with_envs(cfg, env(), env()).unwrap();
        let mut tc = Trace::new(u64::MAX);
        tr.run(&mut tc).unwrap();
        (tc.sums, serde_json::to_string(tr.records()).unwrap())
    };
    let _ = (t, r);
    assert_eq!(run(Mode::Psrl), run(Mode::Asym));
}

// ---- ablations ----

#[test]
fn representation_first_freezes_the_predictor_in_phase_two() {
    let cfg = small(TrainConfig { mode: Mode::ReprFirst, pretrain_frac: 0.5, env_steps: 2000, seed: 3, ..Default::default() });
    let mut tc = Trace::new(u64::MAX);
    let mut tr = Trainer::new(cfg, &cartpole_projection()).unwrap();
    tr.run(&mut tc).unwrap();
    let g: Vec<u64> = tc.parts.iter().map(|c| c.g).collect();
    let head: Vec<u64> = tc.parts.iter().map(|c| c.head).collect();
    let switch = head.windows(2).position(|w| w[0] != w[1]).expect("head trains in phase 2");
    assert!(switch > 10);
    assert!(g[..=switch].windows(2).all(|w| w[0] != w[1]), "g trains in phase 1");
    assert!(g[switch..].windows(2).all(|w| w[0] == w[1]), "g frozen in phase 2");
    assert!(tr.records().iter().any(|r| r.phase == 1) && tr.records().last().unwrap().phase == 2);
}

#[test]
fn policy_first_trains_on_true_state_then_fits_the_predictor() {
    let cfg = small(TrainConfig { mode: Mode::PolicyFirst, pretrain_frac: 0.5, env_steps: 2000, seed: 3, ..Default::default() });
    let mut tc = Trace::new(u64::MAX);
    let mut tr = Trainer::new(cfg, &cartpole_projection()).unwrap();
    tr.run(&mut tc).unwrap();
    let first_g = tc.parts.iter().position(|c| c.g != tc.parts[0].g).expect("g trains in phase 2");
    assert!(first_g > 10);
    let head_at = tc.parts[first_g].head;
    assert!(tc.parts[first_g..].iter().all(|c| c.head == head_at));
    assert_eq!(tr.bundle.input, Input::Predicted);
}

#[test]
fn empty_pretraining_fraction_starts_in_phase_two() {
    for mode in [Mode::ReprFirst, Mode::PolicyFirst] {
        let cfg = small(TrainConfig { mode, pretrain_frac: 0.0, env_steps: 300, seed: 1, ..Default::default() });
        let mut tr = Trainer::new(cfg, &cartpole_projection()).unwrap();
        tr.run(&mut ()).unwrap();
        assert!(tr.records().iter().all(|r| r.phase == 2));
    }
}

#[test]
fn frozen_gradient_is_a_hard_error() {
    let mut f = fixture(Algo::Ddqn, Mode::Psrl, EnvKind::CartPole, 0, 0).unwrap();
    let mut opts = f.bundle.optimizers(&TrainConfig::default()).unwrap();
    f.bundle.ddqn_loss(&f.batch, &f.q_targets, LossWeights { critic: 1.0, actor: 0.0, entropy: 0.0, state: 1.0 }, true).unwrap();
    f.bundle.frozen.g = true;
    assert!(f.bundle.apply_gradients(&mut opts, None).is_err());
}

#[test]
fn seed_families_are_disjoint() {
    for seed in [0u64, 1, 77, 1 << 29] {
        for i in [0u64, 1, 999] {
            let a = train_episode_seed(seed, i);
            let b = eval_episode_seed(seed, i);
            let c = held_out_seed(seed, i);
            assert!(a != b && b != c && a != c);
            assert_eq!(a >> 62, 0);
            assert_eq!(b >> 62, 1);
            assert_eq!(c >> 63, 1);
        }
    }
}

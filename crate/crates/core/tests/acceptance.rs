//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs with `harness = false`; the exit status is nonzero when any line fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psrl::agents::audit::{audit_loss, AuditLoss, AUDIT_TOLERANCE};
use psrl::agents::losses::advantage;
use psrl::agents::{Algo, LossReport, Mode, Observer, PolicyBundle, TrainConfig, Trainer};
use psrl::envs::{markov_sufficiency_score, EnvConfig, EnvKind, ObsKind, PomdpEnv, TabularDynamics};
use psrl::harness::{bin_curve, mean_std, preset, run_experiment, sign_test_p, ExperimentConfig, Manifest, RunSummary, BINS};
use psrl::nn::Tensor;
use psrl::theory::{policy_evaluation, run_suite, value_iteration, SuiteConfig, TabularMdp};

type Check = Result<String, String>;

struct Outcome {
    id: u32,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn within(limit: Duration, elapsed: Duration, check: Check) -> Check {
    match check {
        Ok(d) if elapsed > limit => Err(format!("{d}; took {:.0}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())),
        other => other,
    }
}

fn timed(f: impl FnOnce() -> Check) -> (Check, Duration) {
    let t = Instant::now();
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
    });
    (r, t.elapsed())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---- 1 ----

fn gradient_audit() -> Check {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    for which in AuditLoss::ALL {
        for seed in 0..10 {
            let r = audit_loss(which, seed).map_err(err)?;
            let w = worst.entry(which.as_str()).or_insert(0.0);
            *w = w.max(r.max_rel_error);
            if !r.pass {
                failures.push(format!("{}@{seed}", which.as_str()));
            }
        }
    }
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    if failures.is_empty() {
        Ok(format!("50 audits within {AUDIT_TOLERANCE:e}: {detail}"))
    } else {
        Err(format!("failed {failures:?}: {detail}"))
    }
}

// ---- 2 ----

fn theory_suite() -> Check {
    let report = run_suite(&SuiteConfig { num_mdps: 1000, ..Default::default() }).map_err(err)?;
    let lines: Vec<String> = report.checks.iter().map(|c| format!("{} {}", c.name, if c.pass { "ok" } else { "FAIL" })).collect();
    if report.passed() {
        Ok(format!("1000 MDPs: {}", lines.join(", ")))
    } else {
        Err(report.table())
    }
}

// ---- 3 ----

struct Trace {
    limit: u64,
    sums: Vec<u64>,
}

impl Observer for Trace {
    fn on_update(&mut self, update: u64, bundle: &PolicyBundle, _: &LossReport) -> bool {
        self.sums.push(bundle.checksum());
        update < self.limit
    }
}

fn trajectory(cfg: TrainConfig, env: &EnvConfig) -> Result<(Vec<u64>, Trainer), String> {
    let mut t = Trace { limit: 100, sums: Vec::new() };
    let mut tr = Trainer::new(cfg, env).map_err(err)?;
    tr.run(&mut t).map_err(err)?;
    if t.sums.len() != 100 {
        return Err(format!("only {} updates recorded", t.sums.len()));
    }
    Ok((t.sums, tr))
}

fn reductions() -> Check {
    let env = EnvConfig { projection_dim: 12, ..EnvConfig::new(EnvKind::CartPole, ObsKind::Projection) };
    let mut notes = Vec::new();
    for algo in [Algo::Ddqn, Algo::Ppo] {
        let base = TrainConfig {
            algo,
            hidden: 16,
            predictor_hidden: 16,
            learning_starts: 64,
            train_every: 1,
            target_sync: 50,
            ppo_epochs: 2,
            ppo_minibatch: 16,
            seed: 21,
            ..Default::default()
        };
        let k = 3;
        let (psrl, _) = trajectory(TrainConfig { mode: Mode::Psrl, k, beta: 0.0, ..base.clone() }, &env)?;
        let (e2e, e2e_t) = trajectory(TrainConfig { mode: Mode::E2e, k, ..base.clone() }, &env)?;
        if psrl != e2e {
            let at = psrl.iter().zip(&e2e).position(|(a, b)| a != b).unwrap_or(0);
            return Err(format!("{algo}: beta=0 and end-to-end diverge at update {at}"));
        }
        let n = e2e_t.bundle.state_dim;
        if e2e_t.bundle.feature_dim() != n + k {
            return Err(format!("{algo}: end-to-end head width {} != K+n", e2e_t.bundle.feature_dim()));
        }
        let (plain, _) = trajectory(TrainConfig { mode: Mode::Psrl, ..base.clone() }, &env)?;
        let (k0, k0_t) = trajectory(TrainConfig { mode: Mode::Psrl, k: 0, beta: 1.0, ..base.clone() }, &env)?;
        if plain != k0 {
            return Err(format!("{algo}: K=0 differs from PSRL-0"));
        }
        if k0_t.bundle.h.is_some() || k0_t.bundle.feature_dim() != n {
            return Err(format!("{algo}: K=0 still carries a latent encoder"));
        }
        let (sup, _) = trajectory(TrainConfig { mode: Mode::Psrl, k, beta: 1.0, ..base }, &env)?;
        if sup == psrl {
            return Err(format!("{algo}: beta had no effect, the comparison is vacuous"));
        }
        notes.push(format!("{algo} 100/100 identical"));
    }
    Ok(notes.join(", "))
}

// ---- 4 ----

fn two_state_env(t: &[f64], r: &[f64]) -> Result<PomdpEnv, String> {
    let d = TabularDynamics::new(t.to_vec(), r.to_vec(), vec![vec![0.0], vec![1.0]], vec![0.5, 0.5], 2, 10).map_err(err)?;
    let c = EnvConfig { name: EnvKind::Tabular, obs: ObsKind::Identity, frame_stack: 1, ..Default::default() };
    PomdpEnv::from_dynamics(EnvKind::Tabular, Box::new(d), &c).map_err(err)
}

fn oracle_rl() -> Check {
    // s0: a0 stays (r=0), a1 moves (r=1); s1: a0 moves (r=2), a1 stays (r=0.5)
    let t = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let r = [0.0, 1.0, 2.0, 0.5];
    let gamma = 0.5;
    let cfg = TrainConfig {
        mode: Mode::TrueState,
        gamma,
        env_steps: 20_000,
        train_every: 1,
        target_sync: 200,
        learning_starts: 200,
        lr_decay: true,
        hidden: 32,
        seed: 0,
        ..Default::default()
    };
    let mut tr = Trainer::with_envs(cfg, two_state_env(&t, &r)?, two_state_env(&t, &r)?).map_err(err)?;
    tr.run(&mut ()).map_err(err)?;
    // normalised embeddings of the two states
    let q = tr.bundle.head.predict(&Tensor::from_rows(&[vec![-1.0], vec![1.0]]).map_err(err)?).map_err(err)?;
    let mdp = TabularMdp::new(2, 2, t.to_vec(), r.to_vec(), gamma, vec![vec![0.0], vec![1.0]]).map_err(err)?;
    let vi = value_iteration(&mdp, 1e-13).map_err(err)?;
    let sup = q.data().iter().zip(&vi.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // on-policy one-step advantages under exact V^pi on a random 5-state MDP
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (s, a) = (5, 3);
    let mut trans = vec![0.0; s * a * s];
    for row in trans.chunks_mut(s) {
        row.iter_mut().for_each(|p| *p = rng.gen::<f64>());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    let rew: Vec<f64> = (0..s * a).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let policy: Vec<Vec<f64>> = (0..s)
        .map(|_| {
            let w: Vec<f64> = (0..a).map(|_| rng.gen::<f64>() + 0.1).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    let g = 0.9;
    let m = TabularMdp::new(s, a, trans.clone(), rew.clone(), g, (0..s).map(|i| vec![i as f64]).collect()).map_err(err)?;
    let v = policy_evaluation(&m, &policy).map_err(err)?;
    let draw = |rng: &mut ChaCha8Rng, p: &[f64]| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        p.iter().position(|x| {
            acc += x;
            u < acc
        }).unwrap_or(p.len() - 1)
    };
    let n = 100_000;
    let mut state = 0;
    let mut sum = 0.0;
    for _ in 0..n {
        let act = draw(&mut rng, &policy[state]);
        let next = draw(&mut rng, &trans[(state * a + act) * s..(state * a + act + 1) * s]);
        sum += advantage(rew[state * a + act], false, g, v[state], v[next]);
        state = next;
    }
    let mean = sum / n as f64;
    let detail = format!("Q sup error {sup:.2e}, |E[A]| {:.2e} over {n}", mean.abs());
    if sup <= 1e-2 && mean.abs() < 1e-2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 5, 6, 7 ----

const LEARNING: [&str; 5] = ["cartpole_ddqn", "acrobot_ddqn", "mountain_car_ddqn", "pendulum_ppo", "cartpole_cont_ppo"];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn experiment(name: &str, label: &str, modes: Vec<Mode>, frac: f64, root: &Path) -> Result<Manifest, String> {
    let base = preset(name).map_err(err)?;
    let cfg = ExperimentConfig {
        label: label.to_string(),
        seeds: SEEDS.to_vec(),
        modes,
        train: TrainConfig { pretrain_frac: frac, ..base.train.clone() },
        ..base
    };
    let m = run_experiment(&cfg, &root.join(label)).map_err(err)?;
    if let Some(f) = m.failed().first() {
        return Err(format!("{}: {}", f.run_id, f.error.as_deref().unwrap_or("")));
    }
    Ok(m)
}

fn runs(m: &Manifest, mode: Mode) -> Vec<&RunSummary> {
    m.runs.iter().filter(|r| r.mode == mode).collect()
}

/// Highest point of the seed-averaged, binned evaluation curve.
fn peak_mean_eval(m: &Manifest, mode: Mode, dir: &Path) -> Result<f64, String> {
    let total = m.config.train.env_steps as u64;
    let mut curves = Vec::new();
    for r in runs(m, mode) {
        let rows = psrl::harness::read_csv(&dir.join(&r.csv)).map_err(err)?;
        let pts: Vec<(u64, f64)> = rows.iter().filter_map(|x| x.eval_return_mean.map(|v| (x.env_step, v))).collect();
        curves.push(bin_curve(&pts, total, BINS));
    }
    (0..BINS)
        .filter_map(|b| {
            let xs: Vec<f64> = curves.iter().filter_map(|c| c[b]).collect();
            (xs.len() == curves.len()).then(|| mean_std(&xs).0)
        })
        .reduce(f64::max)
        .ok_or_else(|| "no evaluation points".to_string())
}

fn mean_of(rs: &[&RunSummary], f: impl Fn(&RunSummary) -> Option<f64>) -> Option<f64> {
    let xs: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
    (xs.len() == rs.len() && !xs.is_empty()).then(|| mean_std(&xs).0)
}

fn learning(manifests: &BTreeMap<&str, Manifest>, root: &Path) -> Check {
    let mut fails = Vec::new();
    let cp = peak_mean_eval(&manifests["cartpole_ddqn"], Mode::Psrl, &root.join("cartpole_ddqn"))?;
    if cp < 195.0 {
        fails.push(format!("cartpole peak mean eval {cp:.1} < 195"));
    }
    let pd = peak_mean_eval(&manifests["pendulum_ppo"], Mode::Psrl, &root.join("pendulum_ppo"))?;
    if pd < -300.0 {
        fails.push(format!("pendulum peak mean eval {pd:.1} < -300"));
    }
    let mut wins = 0;
    let mut aucs = Vec::new();
    for name in LEARNING {
        let m = &manifests[name];
        let p = mean_of(&runs(m, Mode::Psrl), |r| r.eval_auc).ok_or("missing AUC")?;
        let e = mean_of(&runs(m, Mode::E2e), |r| r.eval_auc).ok_or("missing AUC")?;
        if p >= e {
            wins += 1;
        }
        aucs.push(format!("{name} {p:.1}/{e:.1}"));
    }
    if wins < 4 {
        fails.push(format!("PSRL AUC >= E2E on {wins}/5"));
    }
    let detail = format!("cartpole {cp:.1}, pendulum {pd:.1}, AUC psrl/e2e wins {wins}/5 [{}]", aucs.join(", "));
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", fails.join("; ")))
    }
}

fn interpretability(manifests: &BTreeMap<&str, Manifest>) -> Check {
    let mut wins = 0;
    let mut parts = Vec::new();
    for name in LEARNING {
        let m = &manifests[name];
        let p = mean_of(&runs(m, Mode::Psrl), |r| r.held_out_mse.map(|x| x.normalized)).ok_or("missing MSE")?;
        let e = mean_of(&runs(m, Mode::E2e), |r| r.held_out_mse.map(|x| x.normalized)).ok_or("missing MSE")?;
        let ratio = e / p.max(f64::MIN_POSITIVE);
        if ratio >= 10.0 {
            wins += 1;
        }
        parts.push(format!("{name} {p:.2e} vs {e:.2e} ({ratio:.0}x)"));
    }
    let detail = format!("{wins}/5 envs >= 10x: {}", parts.join(", "));
    if wins >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation(manifests: &BTreeMap<&str, Manifest>, root: &Path) -> Check {
    let mut psrl_wins = 0u64;
    let mut losses = 0u64;
    let mut parts = Vec::new();
    for name in ["cartpole_ddqn", "acrobot_ddqn"] {
        let reference = &manifests[name];
        for frac in [0.1, 0.25, 0.5] {
            let label = format!("{name}-policy_first-{frac}");
            let m = experiment(name, &label, vec![Mode::PolicyFirst], frac, root)?;
            let mut w = 0;
            for r in runs(&m, Mode::PolicyFirst) {
                let base = runs(reference, Mode::Psrl).into_iter().find(|b| b.seed == r.seed).ok_or("missing PSRL run")?;
                let (pf, ps) = (r.final_eval_return.ok_or("no eval")?, base.final_eval_return.ok_or("no eval")?);
                if ps > pf {
                    w += 1;
                    psrl_wins += 1;
                } else if pf > ps {
                    losses += 1;
                }
            }
            parts.push(format!("{name}@{frac} {w}/5"));
        }
    }
    let n = psrl_wins + losses;
    let p = sign_test_p(psrl_wins, n);
    let detail = format!("PSRL-0 better in {psrl_wins}/{n} untied pairs, sign test p={p:.1e} [{}]", parts.join(", "));
    if p < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- 8 ----

fn markov() -> Check {
    let mut parts = Vec::new();
    let mut bad = Vec::new();
    for seed in 0..5u64 {
        let c = EnvConfig { visible: vec![0, 2], frame_stack: 1, ..EnvConfig::new(EnvKind::CartPole, ObsKind::Select) };
        let mut e = PomdpEnv::new(&c).map_err(err)?;
        let k1 = markov_sufficiency_score(&mut e, 1, 100_000, seed).map_err(err)?.score;
        let k2 = markov_sufficiency_score(&mut e, 2, 100_000, seed).map_err(err)?.score;
        if !(k1 > k2) {
            bad.push(seed);
        }
        parts.push(format!("{k1:.3}>{k2:.3}"));
    }
    let detail = format!("k=1 vs k=2 scores: {}", parts.join(", "));
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("seeds {bad:?} not ordered; {detail}"))
    }
}

// ---- 9 ----

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn cli_determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_psrl");
    let work = tempfile::tempdir().map_err(err)?;
    let w = work.path().display().to_string();
    let small = ["--preset", "cartpole_identity", "--steps", "3000", "--seeds", "0,1", "--set", "train.learning_starts=200"];
    let mut commands: Vec<Vec<String>> = vec![
        vec!["presets".into()],
        vec!["gradcheck".into(), "--seeds".into(), "2".into()],
        vec!["verify-theory".into(), "--num-mdps".into(), "40".into(), "--seed".into(), "3".into(), "--emit-csv".into(), format!("{w}/theory.csv")],
        vec!["markov".into(), "--visible".into(), "0,2".into(), "--samples".into(), "20000".into()],
    ];
    let mut train: Vec<String> = vec!["train".into()];
    train.extend(small.iter().map(|s| s.to_string()));
    train.extend(["--out".into(), format!("{w}/runs")]);
    commands.push(train);
    let mut ablate: Vec<String> = vec!["ablate".into(), "--order".into(), "policy".into(), "--pretrain-frac".into(), "0.25".into()];
    ablate.extend(small.iter().map(|s| s.to_string()));
    ablate.extend(["--out".into(), format!("{w}/runs")]);
    commands.push(ablate);
    commands.push(vec!["report".into(), "--in".into(), format!("{w}/runs"), "--out".into(), format!("{w}/report")]);

    let invoke = || -> Result<(Vec<(Option<i32>, Vec<u8>, Vec<u8>)>, BTreeMap<String, Vec<u8>>), String> {
        for e in std::fs::read_dir(work.path()).map_err(err)?.flatten() {
            let p = e.path();
            if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) }.map_err(err)?;
        }
        let mut outputs = Vec::new();
        for args in &commands {
            let o = Command::new(bin).args(args).output().map_err(err)?;
            if !o.status.success() {
                return Err(format!("`psrl {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)));
            }
            outputs.push((o.status.code(), o.stdout, o.stderr));
        }
        Ok((outputs, snapshot(work.path())))
    };
    let (out_a, files_a) = invoke()?;
    let (out_b, files_b) = invoke()?;
    for (i, (a, b)) in out_a.iter().zip(&out_b).enumerate() {
        if a != b {
            return Err(format!("`psrl {}` printed different output", commands[i].join(" ")));
        }
    }
    if files_a.keys().ne(files_b.keys()) {
        return Err("different file sets".into());
    }
    if let Some((k, _)) = files_a.iter().find(|(k, v)| files_b[*k] != **v) {
        return Err(format!("{k} differs between invocations"));
    }
    Ok(format!("{} commands, {} output files byte-identical", commands.len(), files_a.len()))
}

fn main() {
    let mut outcomes = Vec::new();
    let mut record = |id, name, limit: Duration, f: &mut dyn FnMut() -> Check| {
        let (r, elapsed) = timed(f);
        let result = within(limit, elapsed, r);
        let o = Outcome { id, name, result, elapsed };
        print_line(&o);
        outcomes.push(o);
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    record(1, "gradient audit", min(1), &mut gradient_audit);
    record(2, "theorem suite", min(2), &mut theory_suite);
    record(3, "reduction equivalences", min(1), &mut reductions);
    record(4, "oracle RL correctness", min(2), &mut oracle_rl);

    let root = tempfile::tempdir().expect("tempdir");
    let mut manifests: BTreeMap<&str, Manifest> = BTreeMap::new();
    let mut build = || -> Check {
        for name in LEARNING {
            manifests.insert(name, experiment(name, name, vec![Mode::Psrl, Mode::E2e], 0.0, root.path())?);
        }
        learning(&manifests, root.path())
    };
    record(5, "desk-scale learning", min(60), &mut build);
    if manifests.len() == LEARNING.len() {
        record(6, "interpretability table", min(1), &mut || interpretability(&manifests));
        record(7, "policy-first ablation", min(45), &mut || ablation(&manifests, root.path()));
    } else {
        let skipped = || Err("criterion 5 runs did not complete".to_string());
        record(6, "interpretability table", min(1), &mut || skipped());
        record(7, "policy-first ablation", min(45), &mut || skipped());
    }
    record(8, "Markov diagnostic", min(2), &mut markov);
    record(9, "CLI determinism", min(5), &mut cli_determinism);

    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(o: &Outcome) {
    let (tag, detail) = match &o.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {} {} ({:.1}s): {detail}", o.id, o.name, o.elapsed.as_secs_f64());
}

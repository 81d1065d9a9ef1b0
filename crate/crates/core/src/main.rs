use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use psrl::agents::audit::{audit_loss, AuditLoss, AUDIT_TOLERANCE};
use psrl::agents::Mode;
use psrl::envs::{markov_noise_floor, markov_sufficiency_score, EnvConfig, EnvKind, ObsKind, PomdpEnv};
use psrl::harness::{experiment_dir, preset, report, run_experiment, ExperimentConfig, Manifest, PRESETS};
use psrl::theory::{run_suite, SuiteConfig};
use psrl::{Error, Result};

#[derive(Parser)]
#[command(name = "psrl", version, about = "State-supervised policy learning on small control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (mode, seed) pair of an experiment.
    Train(TrainArgs),
    /// Compare a two-phase schedule against joint training.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum)]
        order: Order,
        #[arg(long)]
        pretrain_frac: f64,
    },
    /// Run the tabular property suite.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        num_mdps: usize,
        /// Write the per-MDP table here.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Audit every loss gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Aggregate experiment directories into curves and tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score how far a history window is from Markov.
    Markov {
        #[arg(long, default_value = "cartpole")]
        env: String,
        /// Visible state components; the full state when empty.
        #[arg(long, value_delimiter = ',')]
        visible: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// List the built-in experiment presets.
    Presets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Repr,
    Policy,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Single seed; replaces the seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Arbitrary `dotted.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl TrainArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => ExperimentConfig::default(),
            (Some(_), Some(_)) => return Err(Error::Usage("--config and --preset are exclusive".into())),
        };
        let mut ov: Vec<(String, String)> = Vec::new();
        if let Some(env) = &self.env {
            ov.push(("env.name".into(), format!("\"{env}\"")));
        }
        if let Some(mode) = self.mode {
            ov.push(("modes".into(), format!("[\"{mode}\"]")));
            ov.push(("train.mode".into(), format!("\"{mode}\"")));
        }
        if let Some(k) = self.k {
            ov.push(("train.k".into(), k.to_string()));
        }
        if let Some(beta) = self.beta {
            ov.push(("train.beta".into(), beta.to_string()));
        }
        if let Some(seed) = self.seed {
            ov.push(("seeds".into(), format!("[{seed}]")));
        }
        if let Some(seeds) = &self.seeds {
            ov.push(("seeds".into(), serde_json::to_string(seeds)?));
        }
        if let Some(steps) = self.steps {
            ov.push(("train.env_steps".into(), steps.to_string()));
        }
        if let Some(out) = &self.out {
            ov.push(("out".into(), serde_json::to_string(out)?));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            ov.push((k.trim().to_string(), v.trim().to_string()));
        }
        base.with_overrides(&ov)
    }
}

fn print_manifest(m: &Manifest, dir: &Path) {
    println!("{}", dir.display());
    for r in &m.runs {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<40} episodes {:>6}  steps {:>8}  best {:>10}  final {:>10}  mse {:>12}{}",
            r.run_id,
            r.episodes,
            r.env_steps,
            fmt(r.best_eval_return),
            fmt(r.final_eval_return),
            r.held_out_mse.map_or("-".to_string(), |m| format!("{:.6}", m.normalized)),
            r.error.as_ref().map_or(String::new(), |e| format!("  FAILED: {e}"))
        );
    }
}

fn train(cfg: &ExperimentConfig) -> Result<bool> {
    let dir = experiment_dir(cfg);
    let manifest = run_experiment(cfg, &dir)?;
    print_manifest(&manifest, &dir);
    Ok(manifest.failed().is_empty())
}

fn verify_theory(seed: u64, num_mdps: usize, emit_csv: Option<&Path>) -> Result<bool> {
    let cfg = SuiteConfig { seed, num_mdps, ..Default::default() };
    let report = run_suite(&cfg)?;
    print!("{}", report.table());
    if let Some(path) = emit_csv {
        std::fs::write(path, report.csv())?;
    }
    Ok(report.passed())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let mut ok = true;
    println!("{:<12} {:>14} {:>8}", "loss", "max rel error", "result");
    for which in AuditLoss::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            worst = worst.max(audit_loss(which, seed)?.max_rel_error);
        }
        let pass = worst <= AUDIT_TOLERANCE;
        ok &= pass;
        println!("{:<12} {:>14.3e} {:>8}", which.as_str(), worst, if pass { "PASS" } else { "FAIL" });
    }
    Ok(ok)
}

fn markov(env: &str, visible: &[usize], ks: &[usize], samples: usize, seeds: &[u64]) -> Result<bool> {
    let kind: EnvKind = serde_json::from_value(serde_json::Value::String(env.into()))
        .map_err(|_| Error::Usage(format!("unknown env `{env}`")))?;
    let floor = markov_noise_floor(samples, 5, 0)?;
    println!("noise floor {floor:.5}");
    println!("{:>6} {:>3} {:>10} {:>9}", "seed", "k", "score", "coverage");
    for &seed in seeds {
        for &k in ks {
            let obs = if visible.is_empty() { ObsKind::Identity } else { ObsKind::Select };
            let cfg = EnvConfig { frame_stack: 1, visible: visible.to_vec(), ..EnvConfig::new(kind, obs) };
            let mut e = PomdpEnv::new(&cfg)?;
            let r = markov_sufficiency_score(&mut e, k, samples, seed)?;
            println!("{seed:>6} {k:>3} {:>10.5} {:>9.3}", r.score, r.coverage);
            if let Some(w) = r.warning {
                println!("       warning: {w}");
            }
        }
    }
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => train(&args.load()?),
        Command::Ablate { train: args, order, pretrain_frac } => {
            let base = args.load()?;
            let mode = match order {
                Order::Repr => Mode::ReprFirst,
                Order::Policy => Mode::PolicyFirst,
            };
            let mut cfg = base.with_overrides(&[
                ("train.pretrain_frac".into(), pretrain_frac.to_string()),
                ("modes".into(), format!("[\"{mode}\", \"psrl\"]")),
            ])?;
            cfg.label = format!("{}-{}-{}", cfg.label, mode, pretrain_frac);
            cfg.validate()?;
            train(&cfg)
        }
        Command::VerifyTheory { seed, num_mdps, emit_csv } => verify_theory(seed, num_mdps, emit_csv.as_deref()),
        Command::Gradcheck { seeds } => gradcheck(seeds),
        Command::Report { input, out } => {
            let m = report(&input, &out)?;
            for s in &m.sources {
                println!("{}", s.dir);
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Markov { env, visible, k, samples, seeds } => markov(&env, &visible, &k, samples, &seeds),
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

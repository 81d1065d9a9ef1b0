//! Multi-seed experiment execution.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::mse::{held_out_mse, held_out_seeds, HeldOutMse};
use super::record::{rows, write_csv, SCHEMA_VERSION};
use super::report::{bin_curve, BINS};
use crate::agents::trainer::train_episode_seed;
use crate::agents::{Mode, Trainer};
use crate::envs::PomdpEnv;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub csv: String,
    /// `None` when the run finished; the diagnostic otherwise.
    pub error: Option<String>,
    pub episodes: u64,
    pub env_steps: u64,
    pub final_eval_return: Option<f64>,
    pub best_eval_return: Option<f64>,
    /// Mean of the binned evaluation-return curve.
    pub eval_auc: Option<f64>,
    pub held_out_mse: Option<HeldOutMse>,
    /// First and last training-episode reset seeds.
    pub train_seed_range: Option<(u64, u64)>,
    pub held_out_seeds: Vec<u64>,
    pub calibration_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub label: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let version = v.get("schema_version").and_then(|x| x.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Report(format!("{}: unsupported schema version {version:?}", path.display())));
        }
        serde_json::from_value(v).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join(Self::FILE), text)?;
        Ok(())
    }

    pub fn failed(&self) -> Vec<&RunSummary> {
        self.runs.iter().filter(|r| r.error.is_some()).collect()
    }

    /// Held-out and calibration seeds never coincide with a training seed.
    pub fn check_disjoint(&self) -> Result<()> {
        for r in &self.runs {
            let Some((lo, hi)) = r.train_seed_range else { continue };
            let episodes = (hi - lo) + 1;
            for &s in r.held_out_seeds.iter().chain(&r.calibration_seeds) {
                if (0..episodes).any(|e| train_episode_seed(r.seed, e) == s) {
                    return Err(Error::Report(format!("{}: held-out seed {s} was used for training", r.run_id)));
                }
            }
        }
        Ok(())
    }
}

pub fn run_id(label: &str, mode: Mode, seed: u64) -> String {
    format!("{label}-{mode}-s{seed}")
}

/// Trains one (mode, seed) pair and writes its CSV. A diverged run keeps
/// the rows gathered before the failure.
pub fn run_one(cfg: &ExperimentConfig, mode: Mode, seed: u64, dir: &Path) -> Result<RunSummary> {
    let id = run_id(&cfg.label, mode, seed);
    let train = cfg.train_for(mode, seed);
    let total = train.env_steps as u64;
    let mut trainer = Trainer::new(train, &cfg.env)?;
    let outcome = trainer.run(&mut ());
    let has_predictor = trainer.bundle.g.is_some();
    let k = trainer.bundle.k;
    let csv = format!("{id}.csv");
    write_csv(&dir.join(&csv), &rows(&id, seed, mode, k, has_predictor, trainer.records(), trainer.evals()))?;
    let evals = trainer.evals();
    let curve = bin_curve(&evals.iter().map(|e| (e.env_steps, e.mean_return)).collect::<Vec<_>>(), total.max(1), BINS);
    let filled: Vec<f64> = curve.iter().flatten().copied().collect();
    let episodes = trainer.records().len() as u64;
    let (test, calib) = held_out_seeds(seed, cfg.held_out_episodes, cfg.calibration_episodes);
    let mse = match &outcome {
        Ok(()) => {
            let mut env = PomdpEnv::new(&cfg.env)?;
            held_out_mse(&trainer.bundle, &mut env, &test, &calib, seed)?
        }
        Err(_) => None,
    };
    Ok(RunSummary {
        run_id: id,
        mode,
        seed,
        csv,
        error: outcome.err().map(|e| e.to_string()),
        episodes,
        env_steps: trainer.env_steps(),
        final_eval_return: evals.last().map(|e| e.mean_return),
        best_eval_return: evals.iter().map(|e| e.mean_return).reduce(f64::max),
        eval_auc: (!filled.is_empty()).then(|| filled.iter().sum::<f64>() / filled.len() as f64),
        held_out_mse: mse,
        train_seed_range: (episodes > 0).then(|| (train_episode_seed(seed, 0), train_episode_seed(seed, episodes - 1))),
        held_out_seeds: if mse.is_some() { test } else { Vec::new() },
        calibration_seeds: if mse.is_some_and(|m| m.refit) { calib } else { Vec::new() },
    })
}

/// Runs every (mode, seed) pair on a pool of `cfg.workers` threads and
/// writes one CSV per run plus `manifest.json` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let jobs: Vec<(Mode, u64)> = cfg
        .run_modes()
        .into_iter()
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let runs: Vec<RunSummary> = pool.install(|| {
        jobs.par_iter()
            .map(|&(mode, seed)| run_one(cfg, mode, seed, dir))
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        label: cfg.label.clone(),
        config: cfg.clone(),
        runs,
    };
    manifest.check_disjoint()?;
    manifest.save(dir)?;
    Ok(manifest)
}

/// Output directory of an experiment: `out/label`.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(&cfg.label)
}

//! Per-run CSV rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{EpisodeRecord, EvalRecord, Mode};
use crate::error::{Error, Result};

/// Version of the run CSV and manifest layout.
pub const SCHEMA_VERSION: u32 = 1;

/// One training episode (`episode_return` set) or one evaluation point
/// (`eval_return_mean` set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    #[serde(rename = "K")]
    pub k: usize,
    pub episode: u64,
    pub env_step: u64,
    pub episode_return: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub epsilon: Option<f64>,
    pub state_mse_normalized: Option<f64>,
    pub state_mse_raw: Option<f64>,
}

impl RunRecord {
    pub fn is_eval(&self) -> bool {
        self.eval_return_mean.is_some()
    }
}

/// Interleaves training and evaluation rows in env-step order; an
/// evaluation taken after episode `e` follows that episode's row.
pub fn rows(run_id: &str, seed: u64, mode: Mode, k: usize, has_predictor: bool, episodes: &[EpisodeRecord], evals: &[EvalRecord]) -> Vec<RunRecord> {
    let mse = |m: f64| has_predictor.then_some(m);
    let base = |episode: u64, env_step: u64| RunRecord {
        run_id: run_id.to_string(),
        seed,
        mode,
        k,
        episode,
        env_step,
        episode_return: None,
        eval_return_mean: None,
        epsilon: None,
        state_mse_normalized: None,
        state_mse_raw: None,
    };
    let mut out = Vec::with_capacity(episodes.len() + evals.len());
    let mut ev = evals.iter().peekable();
    let mut push_evals = |upto: u64, out: &mut Vec<RunRecord>| {
        while let Some(e) = ev.next_if(|e| e.episode <= upto) {
            out.push(RunRecord {
                eval_return_mean: Some(e.mean_return),
                state_mse_normalized: mse(e.state_mse),
                state_mse_raw: mse(e.state_mse_raw),
                ..base(e.episode, e.env_steps)
            });
        }
    };
    push_evals(0, &mut out);
    for r in episodes {
        out.push(RunRecord {
            episode_return: Some(r.ret),
            epsilon: r.epsilon,
            state_mse_normalized: mse(r.state_mse),
            state_mse_raw: mse(r.state_mse_raw),
            ..base(r.episode, r.env_steps)
        });
        push_evals(r.episode, &mut out);
    }
    push_evals(u64::MAX, &mut out);
    out
}

pub fn write_csv(path: &Path, rows: &[RunRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Report(e.to_string()))?;
    if rows.is_empty() {
        w.write_record(HEADER).map_err(|e| Error::Report(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Report(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub const HEADER: [&str; 11] = [
    "run_id",
    "seed",
    "mode",
    "K",
    "episode",
    "env_step",
    "episode_return",
    "eval_return_mean",
    "epsilon",
    "state_mse_normalized",
    "state_mse_raw",
];

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Report(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != HEADER {
        return Err(Error::Report(format!("{}: unexpected columns {header:?}", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Report(format!("{}: {e}", path.display()))))
        .collect()
}

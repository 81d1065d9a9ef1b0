//! Empirical check of how far a history window is from Markov.
//!
//! The score is the held-out cross-entropy gain (nats, summed over next-state
//! components) obtained by additionally conditioning on the observation that
//! just left the window. Histories are binned in difference coordinates so
//! that a velocity implied by two frames gets its own bins. Counts are fitted on one half of the episodes and
//! scored on the other, then the halves swap.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, EnvConfig, ObsKind, PomdpEnv, TabularDynamics, EnvKind};
use crate::error::{Error, Result};

pub const BINS: usize = 8;
pub const MIN_SAMPLES: usize = 10_000;
/// Dirichlet pseudo-count pulling each level toward the coarser one.
const SMOOTHING: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovReport {
    pub k: usize,
    pub samples: usize,
    /// Unclipped gain; negative values mean the extra frame only added noise.
    pub raw: f64,
    pub score: f64,
    /// Fraction of held-out samples whose extended context was seen in fitting.
    pub coverage: f64,
    pub warning: Option<String>,
}

struct Sample {
    episode: usize,
    /// Binned history features, see [`history_features`].
    history: Vec<u8>,
    action: u8,
    next: Vec<u8>,
}

fn quantile_edges(values: &mut [f64]) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    (1..BINS)
        .map(|q| values[(q * values.len() / BINS).min(values.len() - 1)])
        .collect()
}

fn bin(edges: &[f64], x: f64) -> u8 {
    edges.partition_point(|&e| e <= x) as u8
}

fn key(parts: &[u8], action: u8) -> u64 {
    parts
        .iter()
        .fold(u64::from(action).wrapping_add(1), |acc, &b| acc.wrapping_mul(0x100000001b3) ^ u64::from(b) + 1)
}

fn random_action(space: &ActionSpace, rng: &mut ChaCha8Rng) -> (Action, u8) {
    match space {
        ActionSpace::Discrete(n) => {
            let a = rng.gen_range(0..*n);
            (Action::Discrete(a), a as u8)
        }
        ActionSpace::Box { low, high } => {
            let u: f64 = rng.gen();
            let v = low[0] + u * (high[0] - low[0]);
            let b = ((u * BINS as f64) as usize).min(BINS - 1) as u8;
            let mut a = vec![v];
            for j in 1..low.len() {
                a.push(low[j] + rng.gen::<f64>() * (high[j] - low[j]));
            }
            (Action::Continuous(a), b)
        }
    }
}

/// Rolls out uniformly random actions until `num_samples` usable transitions
/// (with `k + 1` single frames of history) are gathered.
fn collect(env: &mut PomdpEnv, k: usize, num_samples: usize, seed: u64) -> Result<Vec<(usize, Vec<Vec<f64>>, u8, Vec<f64>)>> {
    let space = env.action_space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_samples);
    let mut episode = 0usize;
    let mut stalls = 0usize;
    while out.len() < num_samples {
        let (state, _) = env.reset(rng.gen());
        let mut frames = vec![env_frame(env, &state)];
        let before = out.len();
        loop {
            let (action, abin) = random_action(&space, &mut rng);
            let step = env.step(&action)?;
            if frames.len() > k {
                out.push((
                    episode,
                    frames[frames.len() - k - 1..].to_vec(),
                    abin,
                    step.next_state.clone(),
                ));
                if out.len() == num_samples {
                    break;
                }
            }
            if step.done {
                break;
            }
            frames.push(env_frame(env, &step.next_state));
        }
        episode += 1;
        if out.len() == before {
            stalls += 1;
            if stalls > 1000 {
                return Err(Error::Env(format!("episodes too short for a history of {}", k + 1)));
            }
        }
    }
    Ok(out)
}

/// Noise-free single frame from the configured lift's current step.
fn env_frame(env: &PomdpEnv, state: &[f64]) -> Vec<f64> {
    match env.config().obs {
        ObsKind::Select => env.config().visible.iter().map(|&d| state[d]).collect(),
        _ => state.to_vec(),
    }
}

/// History features: backward differences oldest first, then the current
/// frame. The leading `frame_len` entries are the part that involves the
/// frame about to leave the window.
fn history_features(frames: &[Vec<f64>]) -> Vec<f64> {
    let mut out: Vec<f64> = frames
        .windows(2)
        .flat_map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect::<Vec<_>>())
        .collect();
    out.extend_from_slice(frames.last().unwrap());
    out
}

fn column_edges(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..rows[0].len())
        .map(|j| {
            let mut v: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            quantile_edges(&mut v)
        })
        .collect()
}

fn digitize(row: &[f64], edges: &[Vec<f64>]) -> Vec<u8> {
    row.iter().zip(edges).map(|(&x, e)| bin(e, x)).collect()
}

fn discretize(raw: Vec<(usize, Vec<Vec<f64>>, u8, Vec<f64>)>) -> Vec<Sample> {
    let features: Vec<Vec<f64>> = raw.iter().map(|r| history_features(&r.1)).collect();
    let nexts: Vec<Vec<f64>> = raw.iter().map(|r| r.3.clone()).collect();
    let feature_edges = column_edges(&features);
    let next_edges = column_edges(&nexts);
    raw.iter()
        .zip(features.iter().zip(&nexts))
        .map(|(r, (f, n))| Sample {
            episode: r.0,
            history: digitize(f, &feature_edges),
            action: r.2,
            next: digitize(n, &next_edges),
        })
        .collect()
}

#[derive(Default)]
struct Counts {
    total: f64,
    by_bin: [f64; BINS],
}

impl Counts {
    fn add(&mut self, y: u8) {
        self.total += 1.0;
        self.by_bin[y as usize] += 1.0;
    }

    fn smoothed(&self, y: u8, prior: f64) -> f64 {
        (self.by_bin[y as usize] + SMOOTHING * prior) / (self.total + SMOOTHING)
    }
}

/// Held-out log-loss gain for one next-state component, plus coverage hits.
fn fold_gain(fit: &[&Sample], eval: &[&Sample], frame_len: usize, dim: usize) -> (f64, usize) {
    let mut marginal = Counts::default();
    let mut base: HashMap<u64, Counts> = HashMap::new();
    let mut rich: HashMap<u64, Counts> = HashMap::new();
    for s in fit {
        let y = s.next[dim];
        marginal.add(y);
        base.entry(key(&s.history[frame_len..], s.action)).or_default().add(y);
        rich.entry(key(&s.history, s.action)).or_default().add(y);
    }
    let empty = Counts::default();
    let mut gain = 0.0;
    let mut hits = 0;
    for s in eval {
        let y = s.next[dim];
        let pm = (marginal.by_bin[y as usize] + 1.0) / (marginal.total + BINS as f64);
        let pb = base.get(&key(&s.history[frame_len..], s.action)).unwrap_or(&empty).smoothed(y, pm);
        let r = rich.get(&key(&s.history, s.action));
        if r.is_some() {
            hits += 1;
        }
        let pr = r.unwrap_or(&empty).smoothed(y, pb);
        gain += pr.ln() - pb.ln();
    }
    (gain, hits)
}

/// Score of the window size `k` on `env`, from `num_samples` random-action
/// transitions. Only the `Select` lift is honoured; every other mode is scored
/// on the full state (the Markov property is a statement about information,
/// not about the rendering).
pub fn markov_sufficiency_score(env: &mut PomdpEnv, k: usize, num_samples: usize, seed: u64) -> Result<MarkovReport> {
    if k == 0 {
        return Err(Error::Config("history window k must be >= 1".into()));
    }
    if num_samples < MIN_SAMPLES {
        return Err(Error::Config(format!("need at least {MIN_SAMPLES} samples, got {num_samples}")));
    }
    let raw = collect(env, k, num_samples, seed)?;
    let frame_len = raw[0].1[0].len();
    let samples = discretize(raw);
    let even: Vec<&Sample> = samples.iter().filter(|s| s.episode % 2 == 0).collect();
    let odd: Vec<&Sample> = samples.iter().filter(|s| s.episode % 2 == 1).collect();
    if even.is_empty() || odd.is_empty() {
        return Err(Error::Env("cross-fitting needs at least two episodes".into()));
    }
    let mut total = 0.0;
    let mut hits = 0;
    for dim in 0..samples[0].next.len() {
        for (fit, eval) in [(&even, &odd), (&odd, &even)] {
            let (g, h) = fold_gain(fit, eval, frame_len, dim);
            total += g;
            hits += h;
        }
    }
    let n = samples.len() as f64;
    let raw_score = total / n;
    let coverage = hits as f64 / (n * samples[0].next.len() as f64);
    let warning = (coverage < 0.5).then(|| {
        format!("only {:.0}% of held-out contexts were seen while fitting", 100.0 * coverage)
    });
    Ok(MarkovReport {
        k,
        samples: samples.len(),
        raw: raw_score,
        score: raw_score.max(0.0),
        coverage,
        warning,
    })
}

/// Random finite chain on a 4x4 grid: 2 actions, each row of `T` supported on
/// four random successors.
pub fn synthetic_markov_chain(seed: u64) -> Result<PomdpEnv> {
    let side = 4;
    let s = side * side;
    let a = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = vec![0.0; s * a * s];
    for row in transitions.chunks_mut(s) {
        for _ in 0..4 {
            row[rng.gen_range(0..s)] += rng.gen::<f64>() + 0.1;
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    let embedding = (0..s).map(|i| vec![(i % side) as f64, (i / side) as f64]).collect();
    let dynamics = TabularDynamics::new(transitions, vec![0.0; s * a], embedding, vec![1.0 / s as f64; s], a, 200)?;
    let config = EnvConfig {
        name: EnvKind::Tabular,
        obs: ObsKind::Identity,
        frame_stack: 1,
        ..Default::default()
    };
    PomdpEnv::from_dynamics(EnvKind::Tabular, Box::new(dynamics), &config)
}

/// `mean + 3 sd` of the raw score at `k = 1` over `runs` known-Markov chains.
pub fn markov_noise_floor(num_samples: usize, runs: usize, seed: u64) -> Result<f64> {
    let mut raws = Vec::with_capacity(runs);
    for r in 0..runs as u64 {
        let mut env = synthetic_markov_chain(seed.wrapping_mul(7919).wrapping_add(r))?;
        raws.push(markov_sufficiency_score(&mut env, 1, num_samples, seed ^ r)?.raw);
    }
    let n = raws.len() as f64;
    let mean = raws.iter().sum::<f64>() / n;
    let var = raws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + 3.0 * var.sqrt())
}

//! Held-out state-prediction error of a trained predictor.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::trainer::{held_out_seed, stream};
use crate::agents::{rollout, Explore, Mode, PolicyBundle};
use crate::envs::{PomdpEnv, StateScale};
use crate::error::{Error, Result};
use crate::theory::solve_linear;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutMse {
    /// Mean squared error per coordinate in normalised units.
    pub normalized: f64,
    /// The same in the environment's own units.
    pub raw: f64,
    /// Whether an affine map was fitted on calibration episodes first.
    pub refit: bool,
    pub samples: usize,
}

/// Least-squares affine map `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    /// `[outputs][inputs + 1]`, bias last.
    pub rows: Vec<Vec<f64>>,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|w| w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()])
            .collect()
    }
}

const RIDGE: f64 = 1e-9;

/// Fits `y ~ W x + b` by the normal equations with a tiny ridge term.
pub fn affine_fit(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<AffineMap> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Usage("affine fit needs matching nonempty samples".into()));
    }
    let d = x[0].len() + 1;
    let mut gram = vec![0.0; d * d];
    let outputs = y[0].len();
    let mut rhs = vec![vec![0.0; d]; outputs];
    for (xi, yi) in x.iter().zip(y) {
        let mut v = xi.clone();
        v.push(1.0);
        for i in 0..d {
            for j in 0..d {
                gram[i * d + j] += v[i] * v[j];
            }
            for (o, r) in rhs.iter_mut().enumerate() {
                r[i] += v[i] * yi[o];
            }
        }
    }
    let trace = (0..d).map(|i| gram[i * d + i]).sum::<f64>().max(1.0);
    for i in 0..d {
        gram[i * d + i] += RIDGE * trace;
    }
    let rows = rhs.into_iter().map(|b| solve_linear(gram.clone(), b)).collect::<Result<_>>()?;
    Ok(AffineMap { rows })
}

/// Mean squared error of `(prediction, target)` pairs in normalised and raw units.
pub fn pair_mse(pairs: &[(Vec<f64>, Vec<f64>)], scale: &StateScale) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Usage("empty held-out set".into()));
    }
    let mut sum = 0.0;
    let mut raw = 0.0;
    let mut count = 0usize;
    for (p, s) in pairs {
        let rp = scale.denormalize(p);
        let rs = scale.denormalize(s);
        for i in 0..p.len() {
            sum += (p[i] - s[i]).powi(2);
            raw += (rp[i] - rs[i]).powi(2);
            count += 1;
        }
    }
    Ok((sum / count as f64, raw / count as f64))
}

fn collect(bundle: &PolicyBundle, env: &mut PomdpEnv, seeds: &[u64], rng: &mut ChaCha8Rng) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut pairs = Vec::new();
    for &s in seeds {
        pairs.extend(rollout(bundle, env, s, Explore::Greedy, rng, true)?.pairs);
    }
    Ok(pairs)
}

/// Held-out and calibration seeds of a run; both lie in the held-out family.
pub fn held_out_seeds(seed: u64, held_out: usize, calibration: usize) -> (Vec<u64>, Vec<u64>) {
    let test = (0..held_out as u64).map(|i| held_out_seed(seed, i)).collect();
    let calib = (0..calibration as u64).map(|i| held_out_seed(seed, held_out as u64 + i)).collect();
    (test, calib)
}

/// Greedy rollouts on `test_seeds`; the end-to-end embedding is first mapped
/// onto states by an affine fit on `calibration_seeds`.
pub fn held_out_mse(bundle: &PolicyBundle, env: &mut PomdpEnv, test_seeds: &[u64], calibration_seeds: &[u64], seed: u64) -> Result<Option<HeldOutMse>> {
    if bundle.g.is_none() {
        return Ok(None);
    }
    if test_seeds.is_empty() {
        return Err(Error::Usage("empty held-out set".into()));
    }
    let mut rng = stream(seed, 0x4e1d);
    let refit = bundle.mode == Mode::E2e;
    let mut pairs = collect(bundle, env, test_seeds, &mut rng)?;
    if refit {
        let calib = collect(bundle, env, calibration_seeds, &mut rng)?;
        let (x, y): (Vec<_>, Vec<_>) = calib.into_iter().unzip();
        let map = affine_fit(&x, &y)?;
        for (p, _) in pairs.iter_mut() {
            *p = map.apply(p);
        }
    }
    let (normalized, raw) = pair_mse(&pairs, &bundle.scale)?;
    Ok(Some(HeldOutMse { normalized, raw, refit, samples: pairs.len() }))
}

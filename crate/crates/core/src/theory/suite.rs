//! Randomised verification of the state-estimation results over many grid
//! MDPs, as run by `psrl verify-theory`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub num_mdps: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma_range: (f64, f64),
    /// Random estimators per MDP for the upper-bound check.
    pub estimators: usize,
    /// Perturbation seeds per MDP for the identity-limit check.
    pub identity_seeds: usize,
    pub tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            num_mdps: 1000,
            max_states: 10,
            max_actions: 4,
            gamma_range: (0.8, 0.99),
            estimators: 4,
            identity_seeds: 4,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MdpRow {
    pub index: usize,
    pub states: usize,
    pub actions: usize,
    pub gamma: f64,
    pub min_gap: f64,
    pub iterations: usize,
    pub bellman_residual: f64,
    pub contraction_ok: bool,
    pub bound_violations: usize,
    pub min_slack: f64,
    pub max_slack: f64,
    /// Largest Q_hat error over estimators with epsilon below half the gap.
    pub q_error_inside: f64,
    /// Q_hat error along epsilon = gap / 2^j, j = 0..6.
    pub halving_errors: Vec<f64>,
    pub halving_ok: bool,
    /// Worst identity fraction at each epsilon = gap / 2^k, k = 1..6.
    pub identity_fractions: Vec<f64>,
    pub identity_ok: bool,
    pub sensitivities: Vec<f64>,
    pub nuisance_constant: f64,
    pub nuisance_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub rows: Vec<MdpRow>,
    pub checks: Vec<CheckLine>,
}

pub const HALVINGS: usize = 7;
pub const NUISANCE_DELTAS: [f64; 3] = [0.1, 0.01, 0.001];

fn check_mdp(index: usize, cfg: &SuiteConfig) -> Result<MdpRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
    let mdp: TabularMdp<f64> = random_grid_mdp(&mut rng, cfg.max_states, cfg.max_actions, cfg.gamma_range);
    let tables = value_iteration(&mdp, cfg.tol)?;
    let gap = mdp.min_gap();
    let na = mdp.num_actions;

    let bellman_residual = tables
        .q
        .chunks(na)
        .zip(&tables.v)
        .map(|(q, v)| (q[argmax(q)] - v).abs())
        .fold(0.0, f64::max);
    // successive sweeps shrink by gamma, up to a few ulps of the value scale
    let floor = 64.0 * f64::EPSILON * tables.v.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let contraction_ok = tables.deltas.windows(2).all(|w| w[1] <= mdp.gamma * w[0] + floor);

    let mut bound_violations = 0;
    let mut min_slack = f64::INFINITY;
    let mut max_slack: f64 = 0.0;
    for _ in 0..cfg.estimators {
        let est = StateEstimator::random(rng.gen_range(0.0..3.0 * gap), rng.gen());
        match verify_upper_bound(&mdp, &tables, &est) {
            Ok(r) => {
                min_slack = min_slack.min(r.slack);
                max_slack = max_slack.max(r.slack);
            }
            Err(Error::Theory(_)) => bound_violations += 1,
            Err(e) => return Err(e),
        }
    }

    let mut q_error_inside: f64 = 0.0;
    for _ in 0..cfg.estimators {
        let est = StateEstimator::random(rng.gen_range(0.0..0.5 * gap), rng.gen());
        q_error_inside = q_error_inside.max(q_hat(&mdp, &tables, &est)?.error);
    }

    let halving_seed: u64 = rng.gen();
    let halving_errors = (0..HALVINGS)
        .map(|j| {
            let est = StateEstimator::random(gap / 2f64.powi(j as i32), halving_seed);
            q_hat(&mdp, &tables, &est).map(|q| q.error)
        })
        .collect::<Result<Vec<_>>>()?;
    let halving_ok = halving_errors.windows(2).all(|w| w[1] <= w[0]) && halving_errors[1..].iter().all(|&e| e == 0.0);

    let epsilons: Vec<f64> = (1..=6).map(|k| gap / 2f64.powi(k)).collect();
    let mut identity_fractions = vec![1.0f64; epsilons.len()];
    let mut identity_ok = true;
    for _ in 0..cfg.identity_seeds {
        let f = observation_identity_limit(&mdp, &epsilons, &Perturbation::Random { seed: rng.gen() })?;
        identity_ok &= f.windows(2).all(|w| w[1] >= w[0]) && f[1..].iter().all(|&x| x == 1.0);
        for (acc, x) in identity_fractions.iter_mut().zip(f) {
            *acc = acc.min(x);
        }
    }

    let (dt, dr) = random_nuisance(&mdp, &mut rng);
    let nuisance = verify_nuisance(&mdp, &dt, &dr, &NUISANCE_DELTAS, cfg.tol)?;
    let nuisance_ok = nuisance.continuous
        && nuisance
            .sensitivity
            .iter()
            .zip(&NUISANCE_DELTAS)
            .all(|(&s, &d)| s <= nuisance.constant * d * (1.0 + 1e-12));

    Ok(MdpRow {
        index,
        states: mdp.num_states,
        actions: na,
        gamma: mdp.gamma,
        min_gap: gap,
        iterations: tables.iterations,
        bellman_residual,
        contraction_ok,
        bound_violations,
        min_slack,
        max_slack,
        q_error_inside,
        halving_errors,
        halving_ok,
        identity_fractions,
        identity_ok,
        sensitivities: nuisance.sensitivity,
        nuisance_constant: nuisance.constant,
        nuisance_ok,
    })
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.num_mdps == 0 {
        return Err(Error::Usage("--num-mdps must be >= 1".into()));
    }
    let rows = (0..cfg.num_mdps)
        .into_par_iter()
        .map(|i| check_mdp(i, cfg))
        .collect::<Result<Vec<_>>>()?;

    let count = |f: &dyn Fn(&MdpRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let n = rows.len();
    let violations: usize = rows.iter().map(|r| r.bound_violations).sum();
    let worst_residual = rows.iter().map(|r| r.bellman_residual).fold(0.0, f64::max);
    let min_slack = rows.iter().map(|r| r.min_slack).fold(f64::INFINITY, f64::min);
    let max_inside = rows.iter().map(|r| r.q_error_inside).fold(0.0, f64::max);
    let mean_halving: Vec<f64> = (0..HALVINGS)
        .map(|j| rows.iter().map(|r| r.halving_errors[j]).sum::<f64>() / n as f64)
        .collect();
    let min_identity: Vec<f64> = (0..6)
        .map(|k| rows.iter().map(|r| r.identity_fractions[k]).fold(1.0, f64::min))
        .collect();
    let mean_sens: Vec<f64> = (0..NUISANCE_DELTAS.len())
        .map(|j| rows.iter().map(|r| r.sensitivities[j]).sum::<f64>() / n as f64)
        .collect();

    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    let checks = vec![
        CheckLine {
            name: "bellman consistency".into(),
            pass: worst_residual <= 1e-9,
            detail: format!("max |max_a Q* - V*| = {worst_residual:.2e}"),
        },
        CheckLine {
            name: "contraction".into(),
            pass: count(&|r| r.contraction_ok) == n,
            detail: format!("{}/{n} MDPs shrink by <= gamma per sweep", count(&|r| r.contraction_ok)),
        },
        CheckLine {
            name: "upper bound V^pi_hat <= V*".into(),
            pass: violations == 0,
            detail: format!("{violations} violations over {} estimators, min slack {min_slack:.3e}", n * cfg.estimators),
        },
        CheckLine {
            name: "Q_hat exact below half gap".into(),
            pass: max_inside == 0.0,
            detail: format!("max sup-error {max_inside:.3e}"),
        },
        CheckLine {
            name: "Q_hat error along eps halving".into(),
            pass: count(&|r| r.halving_ok) == n,
            detail: format!("{}/{n} non-increasing; mean errors {}", count(&|r| r.halving_ok), fmt(&mean_halving)),
        },
        CheckLine {
            name: "identity limit".into(),
            pass: count(&|r| r.identity_ok) == n,
            detail: format!("{}/{n} reach 1; worst fractions {}", count(&|r| r.identity_ok), fmt(&min_identity)),
        },
        CheckLine {
            name: "nuisance continuity".into(),
            pass: count(&|r| r.nuisance_ok) == n,
            detail: format!("{}/{n} decreasing in delta; mean sensitivity {}", count(&|r| r.nuisance_ok), fmt(&mean_sens)),
        },
    ];
    Ok(SuiteReport {
        config: cfg.clone(),
        rows,
        checks,
    })
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let _ = writeln!(out, "{}  {:width$}  {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(
            out,
            "{} MDPs, seed {}: {}",
            self.rows.len(),
            self.config.seed,
            if self.passed() { "all checks passed" } else { "violations found" }
        );
        out
    }

    /// One row per MDP; list-valued fields are `;`-joined.
    pub fn csv(&self) -> String {
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(";");
        let mut out = String::from(
            "index,states,actions,gamma,min_gap,iterations,bellman_residual,contraction_ok,bound_violations,min_slack,max_slack,q_error_inside,halving_errors,halving_ok,identity_fractions,identity_ok,sensitivities,nuisance_constant,nuisance_ok\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{},{:e},{},{},{:e},{:e},{:e},{},{},{},{},{},{:e},{}",
                r.index,
                r.states,
                r.actions,
                r.gamma,
                r.min_gap,
                r.iterations,
                r.bellman_residual,
                r.contraction_ok,
                r.bound_violations,
                r.min_slack,
                r.max_slack,
                r.q_error_inside,
                join(&r.halving_errors),
                r.halving_ok,
                join(&r.identity_fractions),
                r.identity_ok,
                join(&r.sensitivities),
                r.nuisance_constant,
                r.nuisance_ok
            );
        }
        out
    }
}

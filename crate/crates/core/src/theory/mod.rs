//! Exact tabular oracles: finite MDPs embedded in a unit grid, value
//! iteration, exact policy evaluation, and bounded-error state estimators that
//! round perturbed states back onto the grid.

pub mod suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use suite::{run_suite, SuiteConfig, SuiteReport};

/// Row sums of `T` must match 1 within this.
pub const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T> {
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major `[s][a][s']`.
    pub transitions: Vec<T>,
    /// Row-major `[s][a]`.
    pub rewards: Vec<T>,
    pub gamma: T,
    pub initial: Vec<T>,
    /// One point per state; pairwise distinct.
    pub embedding: Vec<Vec<T>>,
}

/// Per state, a distribution over actions.
pub type Policy<T> = Vec<Vec<T>>;

pub fn deterministic_policy<T: Scalar>(actions: &[usize], num_actions: usize) -> Policy<T> {
    actions
        .iter()
        .map(|&a| (0..num_actions).map(|b| if a == b { T::one() } else { T::zero() }).collect())
        .collect()
}

pub fn uniform_policy<T: Scalar>(num_states: usize, num_actions: usize) -> Policy<T> {
    let p = T::one() / T::lit(num_actions as f64);
    vec![vec![p; num_actions]; num_states]
}

fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

impl<T: Scalar> TabularMdp<T> {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<T>,
        rewards: Vec<T>,
        gamma: T,
        embedding: Vec<Vec<T>>,
    ) -> Result<Self> {
        let initial = vec![T::one() / T::lit(num_states.max(1) as f64); num_states];
        let mdp = TabularMdp {
            num_states,
            num_actions,
            transitions,
            rewards,
            gamma,
            initial,
            embedding,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.num_states, self.num_actions);
        if s == 0 || a == 0 {
            return Err(Error::Theory("an MDP needs at least one state and one action".into()));
        }
        if self.transitions.len() != s * a * s || self.rewards.len() != s * a || self.initial.len() != s {
            return Err(Error::Theory("table sizes disagree with |S| and |A|".into()));
        }
        if !(self.gamma >= T::zero() && self.gamma < T::one()) {
            return Err(Error::Theory(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        for (i, row) in self.transitions.chunks(s).enumerate() {
            if row.iter().any(|&p| p < T::zero() || !p.is_finite()) {
                return Err(Error::Theory(format!("T row {i} has a negative or non-finite entry")));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > T::lit(ROW_TOL) {
                return Err(Error::Theory(format!("T row {i} sums to {sum}")));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Theory("rewards must be finite".into()));
        }
        if self.embedding.len() != s {
            return Err(Error::Theory("one embedding point per state required".into()));
        }
        if s > 1 && self.min_gap() <= T::zero() {
            return Err(Error::Theory("embedding is not injective".into()));
        }
        Ok(())
    }

    pub fn p(&self, s: usize, a: usize, next: usize) -> T {
        self.transitions[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn r(&self, s: usize, a: usize) -> T {
        self.rewards[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize, a: usize) -> &[T] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Smallest pairwise distance between embedded states.
    pub fn min_gap(&self) -> T {
        let mut gap = T::infinity();
        for i in 0..self.num_states {
            for j in i + 1..self.num_states {
                gap = gap.min(distance(&self.embedding[i], &self.embedding[j]));
            }
        }
        gap
    }

    /// Index of the embedded state nearest to `point`; ties go to the lower index.
    pub fn snap(&self, point: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (i, e) in self.embedding.iter().enumerate() {
            let d = distance(e, point);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// One Bellman optimality backup of `v`.
    pub fn backup(&self, v: &[T]) -> Vec<T> {
        let mut q = vec![T::zero(); self.num_states * self.num_actions];
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let ev: T = self.row(s, a).iter().zip(v).map(|(&p, &x)| p * x).sum();
                q[s * self.num_actions + a] = self.r(s, a) + self.gamma * ev;
            }
        }
        q
    }

    /// `T_z = normalise(T + delta * dt)`, `R_z = R + delta * dr`.
    pub fn perturbed(&self, dt: &[T], dr: &[T], delta: T) -> Result<Self> {
        if dt.len() != self.transitions.len() || dr.len() != self.rewards.len() {
            return Err(Error::Theory("nuisance tables have the wrong size".into()));
        }
        let s = self.num_states;
        let mut transitions: Vec<T> = self.transitions.iter().zip(dt).map(|(&p, &d)| p + delta * d).collect();
        for (i, row) in transitions.chunks_mut(s).enumerate() {
            if row.iter().any(|&p| p < T::zero()) {
                return Err(Error::Theory(format!(
                    "perturbed row {i} has negative mass; shrink delta or the nuisance table"
                )));
            }
            let sum: T = row.iter().copied().sum();
            if sum <= T::zero() {
                return Err(Error::Theory(format!("perturbed row {i} has no mass")));
            }
            row.iter_mut().for_each(|p| *p /= sum);
        }
        let mut out = self.clone();
        out.transitions = transitions;
        out.rewards = self.rewards.iter().zip(dr).map(|(&r, &d)| r + delta * d).collect();
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueTables<T> {
    pub v: Vec<T>,
    /// Row-major `[s][a]`.
    pub q: Vec<T>,
    pub iterations: usize,
    /// Sup-norm change of `V` per sweep.
    pub deltas: Vec<T>,
}

impl<T: Scalar> ValueTables<T> {
    pub fn greedy(&self, num_actions: usize) -> Vec<usize> {
        self.q.chunks(num_actions).map(argmax).collect()
    }
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Iterates Bellman optimality backups until the sup-norm Bellman residual
/// of the returned `V` is at most `tol`.
pub fn value_iteration<T: Scalar>(mdp: &TabularMdp<T>, tol: T) -> Result<ValueTables<T>> {
    if !(mdp.gamma < T::one()) {
        return Err(Error::Theory(format!("value iteration needs gamma < 1, got {}", mdp.gamma)));
    }
    if !(tol > T::zero()) {
        return Err(Error::Theory("tolerance must be positive".into()));
    }
    mdp.validate()?;
    let na = mdp.num_actions;
    let mut v = vec![T::zero(); mdp.num_states];
    let mut deltas = Vec::new();
    let limit = 1_000_000;
    loop {
        let q = mdp.backup(&v);
        let next: Vec<T> = q.chunks(na).map(|row| row[argmax(row)]).collect();
        let delta = v.iter().zip(&next).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max);
        v = next;
        deltas.push(delta);
        // residual of the new iterate is at most gamma * delta
        if mdp.gamma * delta <= tol || delta == T::zero() {
            let q = mdp.backup(&v);
            return Ok(ValueTables {
                v,
                q,
                iterations: deltas.len(),
                deltas,
            });
        }
        if deltas.len() >= limit {
            return Err(Error::Theory("value iteration did not converge".into()));
        }
    }
}

/// Solves `A x = b` in place with partial pivoting; `a` is row-major `n x n`.
pub fn solve_linear<T: Scalar>(mut a: Vec<T>, mut b: Vec<T>) -> Result<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
        if a[piv * n + col].abs() <= T::epsilon() {
            return Err(Error::Theory("singular evaluation system".into()));
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            b.swap(piv, col);
        }
        for i in col + 1..n {
            let f = a[i * n + col] / a[col * n + col];
            if f != T::zero() {
                for j in col..n {
                    let v = a[col * n + j];
                    a[i * n + j] -= f * v;
                }
                let bc = b[col];
                b[i] -= f * bc;
            }
        }
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= a[i * n + j] * x[j];
        }
        x[i] = acc / a[i * n + i];
    }
    Ok(x)
}

/// Exact `V^pi` from `(I - gamma P_pi) v = r_pi`.
pub fn policy_evaluation<T: Scalar>(mdp: &TabularMdp<T>, policy: &Policy<T>) -> Result<Vec<T>> {
    let n = mdp.num_states;
    if policy.len() != n || policy.iter().any(|p| p.len() != mdp.num_actions) {
        return Err(Error::Theory("policy shape does not match the MDP".into()));
    }
    let mut a = vec![T::zero(); n * n];
    let mut b = vec![T::zero(); n];
    for s in 0..n {
        a[s * n + s] = T::one();
        for (act, &w) in policy[s].iter().enumerate() {
            if w == T::zero() {
                continue;
            }
            b[s] += w * mdp.r(s, act);
            for (next, &p) in mdp.row(s, act).iter().enumerate() {
                a[s * n + next] -= mdp.gamma * w * p;
            }
        }
    }
    solve_linear(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation<T> {
    None,
    /// Uniform in the closed `epsilon` ball, one draw per state.
    Random { seed: u64 },
    /// Explicit offsets, rescaled so the longest one has norm `epsilon`.
    Fixed(Vec<Vec<T>>),
    /// Moves each state a distance `epsilon` toward the listed state.
    Toward(Vec<usize>),
}

/// `s_hat(s) = embed(s) + delta(s)` with `|delta(s)| <= epsilon`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateEstimator<T> {
    pub epsilon: T,
    pub rule: Perturbation<T>,
}

impl<T: Scalar> StateEstimator<T> {
    pub fn exact() -> Self {
        StateEstimator {
            epsilon: T::zero(),
            rule: Perturbation::None,
        }
    }

    pub fn random(epsilon: T, seed: u64) -> Self {
        StateEstimator {
            epsilon,
            rule: Perturbation::Random { seed },
        }
    }

    pub fn offsets(&self, mdp: &TabularMdp<T>) -> Result<Vec<Vec<T>>> {
        let d = mdp.embedding[0].len();
        let n = mdp.num_states;
        let eps = self.epsilon;
        if !(eps >= T::zero()) {
            return Err(Error::Theory("epsilon must be >= 0".into()));
        }
        Ok(match &self.rule {
            Perturbation::None => vec![vec![T::zero(); d]; n],
            Perturbation::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..n)
                    .map(|_| {
                        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                        let radius = rng.gen::<f64>().powf(1.0 / d as f64);
                        dir.iter().map(|x| eps * T::lit(radius * x / norm)).collect()
                    })
                    .collect()
            }
            Perturbation::Fixed(raw) => {
                if raw.len() != n || raw.iter().any(|o| o.len() != d) {
                    return Err(Error::Theory("fixed offsets do not match the embedding".into()));
                }
                let longest = raw.iter().map(|o| distance(o, &vec![T::zero(); d])).fold(T::zero(), T::max);
                if longest == T::zero() {
                    raw.clone()
                } else {
                    raw.iter().map(|o| o.iter().map(|&x| x * eps / longest).collect()).collect()
                }
            }
            Perturbation::Toward(targets) => {
                if targets.len() != n || targets.iter().any(|&t| t >= n) {
                    return Err(Error::Theory("targets must name one state per state".into()));
                }
                (0..n)
                    .map(|s| {
                        let from = &mdp.embedding[s];
                        let to = &mdp.embedding[targets[s]];
                        let len = distance(from, to);
                        if len == T::zero() {
                            vec![T::zero(); d]
                        } else {
                            from.iter().zip(to).map(|(&a, &b)| (b - a) * eps / len).collect()
                        }
                    })
                    .collect()
            }
        })
    }

    /// `snap(s_hat(s))` for every state.
    pub fn snapped(&self, mdp: &TabularMdp<T>) -> Result<Vec<usize>> {
        let offsets = self.offsets(mdp)?;
        Ok(mdp
            .embedding
            .iter()
            .zip(&offsets)
            .map(|(e, o)| {
                let p: Vec<T> = e.iter().zip(o).map(|(&x, &y)| x + y).collect();
                mdp.snap(&p)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QHat<T> {
    pub snapped: Vec<usize>,
    /// `Q*(snap(s_hat(s)), a)`, row-major `[s][a]`.
    pub q_hat: Vec<T>,
    pub policy: Vec<usize>,
    /// `sup_{s,a} |Q_hat - Q*|`.
    pub error: T,
}

pub fn q_hat<T: Scalar>(mdp: &TabularMdp<T>, tables: &ValueTables<T>, est: &StateEstimator<T>) -> Result<QHat<T>> {
    let na = mdp.num_actions;
    let snapped = est.snapped(mdp)?;
    let mut q_hat = Vec::with_capacity(tables.q.len());
    let mut error = T::zero();
    for (s, &j) in snapped.iter().enumerate() {
        for a in 0..na {
            let q = tables.q[j * na + a];
            error = error.max((q - tables.q[s * na + a]).abs());
            q_hat.push(q);
        }
    }
    let policy = q_hat.chunks(na).map(argmax).collect();
    Ok(QHat {
        snapped,
        q_hat,
        policy,
        error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport<T> {
    /// Exact value of the greedy-optimal policy.
    pub v_star: Vec<T>,
    /// Exact value of the greedy-on-estimates policy under true dynamics.
    pub v_hat: Vec<T>,
    /// `min_s (V* - V^pi_hat)`.
    pub slack: T,
    pub q_error: T,
}

/// Checks `V*(s) >= V^pi_hat(s) - 1e-8` for every state.
pub fn verify_upper_bound<T: Scalar>(mdp: &TabularMdp<T>, tables: &ValueTables<T>, est: &StateEstimator<T>) -> Result<BoundReport<T>> {
    let na = mdp.num_actions;
    let greedy = tables.greedy(na);
    let v_star = policy_evaluation(mdp, &deterministic_policy(&greedy, na))?;
    let qh = q_hat(mdp, tables, est)?;
    let v_hat = if qh.policy == greedy {
        v_star.clone()
    } else {
        policy_evaluation(mdp, &deterministic_policy(&qh.policy, na))?
    };
    let mut slack = T::infinity();
    for (s, (&a, &b)) in v_star.iter().zip(&v_hat).enumerate() {
        if b > a + T::lit(1e-8) {
            return Err(Error::Theory(format!(
                "upper bound violated at state {s}: V* = {a}, V^pi_hat = {b}"
            )));
        }
        slack = slack.min(a - b);
    }
    Ok(BoundReport {
        v_star,
        v_hat,
        slack,
        q_error: qh.error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceReport<T> {
    pub deltas: Vec<T>,
    /// `sup_s |V*_z - V*|` per delta.
    pub sensitivity: Vec<T>,
    /// Smallest `C` with `sensitivity <= C * delta` on every delta.
    pub constant: T,
    /// Sensitivity strictly shrinks with delta (or is identically zero).
    pub continuous: bool,
}

pub fn verify_nuisance<T: Scalar>(
    mdp: &TabularMdp<T>,
    dt: &[T],
    dr: &[T],
    deltas: &[T],
    tol: T,
) -> Result<NuisanceReport<T>> {
    let base = value_iteration(mdp, tol)?;
    let mut sensitivity = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let z = value_iteration(&mdp.perturbed(dt, dr, d)?, tol)?;
        sensitivity.push(z.v.iter().zip(&base.v).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max));
    }
    let mut constant = T::zero();
    for (&s, &d) in sensitivity.iter().zip(deltas) {
        if d > T::zero() {
            constant = constant.max(s / d);
        }
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&i, &j| deltas[j].partial_cmp(&deltas[i]).unwrap());
    let all_zero = sensitivity.iter().all(|&s| s == T::zero());
    let continuous = all_zero || order.windows(2).all(|w| sensitivity[w[1]] < sensitivity[w[0]]);
    Ok(NuisanceReport {
        deltas: deltas.to_vec(),
        sensitivity,
        constant,
        continuous,
    })
}

/// Fraction of states with `snap(s_hat(s)) = s`, per epsilon.
pub fn observation_identity_limit<T: Scalar>(mdp: &TabularMdp<T>, epsilons: &[T], rule: &Perturbation<T>) -> Result<Vec<T>> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Theory("epsilon sequence must be strictly decreasing".into()));
    }
    epsilons
        .iter()
        .map(|&eps| {
            let est = StateEstimator {
                epsilon: eps,
                rule: rule.clone(),
            };
            let snapped = est.snapped(mdp)?;
            let home = snapped.iter().enumerate().filter(|(s, &j)| *s == j).count();
            Ok(T::lit(home as f64 / mdp.num_states as f64))
        })
        .collect()
}

/// Random MDP on distinct unit-grid points in `R^1` or `R^2`.
pub fn random_grid_mdp<T: Scalar>(
    rng: &mut ChaCha8Rng,
    max_states: usize,
    max_actions: usize,
    gamma_range: (f64, f64),
) -> TabularMdp<T> {
    let n = rng.gen_range(2..=max_states.max(2));
    let na = rng.gen_range(2..=max_actions.max(2));
    let dims = rng.gen_range(1..=2);
    let side = if dims == 1 { n + rng.gen_range(0..3) } else { ((n as f64).sqrt().ceil() as usize) + 1 };
    let mut cells: Vec<Vec<usize>> = if dims == 1 {
        (0..side).map(|i| vec![i]).collect()
    } else {
        (0..side * side).map(|i| vec![i % side, i / side]).collect()
    };
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    let embedding = cells[..n]
        .iter()
        .map(|c| c.iter().map(|&x| T::lit(x as f64)).collect())
        .collect();
    let mut transitions = vec![T::zero(); n * na * n];
    for row in transitions.chunks_mut(n) {
        let support = rng.gen_range(1..=n.min(4));
        let mut w = vec![0.0f64; n];
        for _ in 0..support {
            w[rng.gen_range(0..n)] += rng.gen::<f64>() + 0.05;
        }
        let z: f64 = w.iter().sum();
        for (p, x) in row.iter_mut().zip(&w) {
            *p = T::lit(x / z);
        }
        // absorb rounding so the row sums to one in T
        let sum: T = row.iter().copied().sum();
        let last = row.iter().rposition(|&p| p > T::zero()).unwrap();
        row[last] += T::one() - sum;
    }
    let rewards = (0..n * na).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    let gamma = T::lit(rng.gen_range(gamma_range.0..=gamma_range.1));
    TabularMdp::new(n, na, transitions, rewards, gamma, embedding).expect("generator produces valid MDPs")
}

/// Random nuisance tables for [`TabularMdp::perturbed`], supported on the
/// existing transitions so small deltas keep rows non-negative.
pub fn random_nuisance<T: Scalar>(mdp: &TabularMdp<T>, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    let dt = mdp
        .transitions
        .iter()
        .map(|&p| if p > T::zero() { p * T::lit(rng.gen_range(-1.0..1.0)) } else { T::zero() })
        .collect();
    let dr = mdp.rewards.iter().map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    (dt, dr)
}

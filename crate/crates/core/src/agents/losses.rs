//! Scalar loss pieces and their derivatives with respect to network outputs.

use serde::Serialize;

use crate::nn::{log_softmax, softmax, softmax_entropy, softmax_entropy_grad};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub critic: f64,
    pub actor: f64,
    pub entropy: f64,
    pub state: f64,
    /// `critic + alpha1 * actor - alpha2 * entropy`.
    pub rl: f64,
    /// `rl + beta * state`.
    pub composite: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.critic, self.actor, self.entropy, self.state, self.rl, self.composite]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Double-DQN regression target: the online network picks the next action,
/// the target network values it.
pub fn dqn_target(reward: f64, terminal: bool, gamma: f64, next_q_online: &[f64], next_q_target: &[f64]) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * next_q_target[argmax(next_q_online)]
    }
}

/// `mean (target - q)^2` and its gradient with respect to `q`.
pub fn squared_error(q: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = q.len().max(1) as f64;
    let loss = q.iter().zip(targets).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / n;
    let grad = q.iter().zip(targets).map(|(a, b)| 2.0 * (a - b) / n).collect();
    (loss, grad)
}

/// `A = r + gamma * v_next * (1 - done) - v`.
pub fn advantage(reward: f64, terminal: bool, gamma: f64, v: f64, v_next: f64) -> f64 {
    let boot = if terminal { 0.0 } else { gamma * v_next };
    reward + boot - v
}

/// `min(rho A, clip(rho, 1 - eta, 1 + eta) A)`.
pub fn ppo_surrogate(ratio: f64, adv: f64, eta: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eta, 1.0 + eta) * adv)
}

/// Mean clipped-surrogate loss and its gradient with respect to the new
/// log-probabilities.
pub fn ppo_actor_loss(new_log_probs: &[f64], old_log_probs: &[f64], advantages: &[f64], eta: f64) -> (f64, Vec<f64>) {
    let n = new_log_probs.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(new_log_probs.len());
    for ((&new, &old), &adv) in new_log_probs.iter().zip(old_log_probs).zip(advantages) {
        let ratio = (new - old).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - eta, 1.0 + eta) * adv;
        loss -= unclipped.min(clipped) / n;
        grad.push(if unclipped <= clipped { -unclipped / n } else { 0.0 });
    }
    (loss, grad)
}

/// `mean_i mean_d (pred - target)^2` over a `[batch, n]` layout, with gradient.
pub fn state_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    squared_error(pred, target)
}

pub fn categorical_log_prob(logits: &[f64], action: usize) -> f64 {
    log_softmax(logits)[action]
}

/// `d log p(a) / d logits = onehot(a) - softmax`.
pub fn categorical_log_prob_grad(logits: &[f64], action: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    g[action] += 1.0;
    g
}

pub fn categorical_entropy(logits: &[f64]) -> f64 {
    softmax_entropy(logits)
}

pub fn categorical_entropy_grad(logits: &[f64]) -> Vec<f64> {
    softmax_entropy_grad(logits)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// `(d/d mean, d/d log_std)` of [`gaussian_log_prob`].
pub fn gaussian_log_prob_grad(action: &[f64], mean: &[f64], log_std: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(mean.len());
    let mut ds = Vec::with_capacity(mean.len());
    for ((&a, &m), &ls) in action.iter().zip(mean).zip(log_std) {
        let var = (2.0 * ls).exp();
        dm.push((a - m) / var);
        ds.push((a - m) * (a - m) / var - 1.0);
    }
    (dm, ds)
}

/// Entropy of a diagonal Gaussian; its derivative in each `log_std` is 1.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|&ls| ls + 0.5 + HALF_LN_2PI).sum()
}

use serde::{Deserialize, Serialize};

use super::network::{Network, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or Adam over an ordered parameter list. Moments are allocated on the
/// first step and bound to parameter positions from then on.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    steps: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr: T::lit(lr),
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::default(), lr)
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = T::lit(lr);
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update and zeroes the gradient accumulators.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params {
                    let grad = std::mem::replace(&mut p.grad, Tensor::zeros(&[0]));
                    p.value.add_scaled(&grad, -self.lr)?;
                    p.grad = grad;
                    p.grad.fill(T::zero());
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != params.len() {
                    return Err(Error::Usage(format!(
                        "optimizer bound to {} parameters, got {}",
                        self.first.len(),
                        params.len()
                    )));
                }
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let t = self.steps as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    if m.shape() != p.value.shape() {
                        return Err(Error::shape("adam moments", m.shape(), p.value.shape()));
                    }
                    let grads = p.grad.data_mut();
                    for (((w, g), mi), vi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grads.iter_mut())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * *g;
                        *vi = b2 * *vi + (T::one() - b2) * *g * *g;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *w -= self.lr * mh / (vh.sqrt() + eps);
                        *g = T::zero();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network<T>) -> Result<()> {
        self.step(net.params_mut())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Param<T>], max_norm: T) -> T {
    let norm = params
        .iter()
        .map(|p| p.grad.squared_norm())
        .sum::<T>()
        .sqrt();
    if norm > max_norm && norm > T::zero() {
        let f = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale(f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Param<f64> {
        Param {
            value: Tensor::row(vec![v]),
            grad: Tensor::row(vec![g]),
        }
    }

    #[test]
    fn sgd_rule() {
        let mut p = scalar_param(1.0, 2.0);
        let mut opt = Optimizer::sgd(0.1).unwrap();
        opt.step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad.data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for mut opt in [Optimizer::sgd(0.1).unwrap(), Optimizer::adam(0.1).unwrap()] {
            let mut p = scalar_param(1.5, 0.0);
            for _ in 0..5 {
                opt.step(vec![&mut p]).unwrap();
            }
            assert_eq!(p.value.data()[0], 1.5);
        }
    }

    #[test]
    fn adam_finds_quadratic_minimum() {
        let mut p = scalar_param(0.0, 0.0);
        let mut opt = Optimizer::adam(0.05).unwrap();
        for _ in 0..500 {
            let x = p.value.data()[0];
            p.grad.data_mut()[0] = 2.0 * (x - 3.0);
            opt.step(vec![&mut p]).unwrap();
        }
        assert!((p.value.data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn learning_rate_must_be_positive() {
        assert!(Optimizer::<f64>::sgd(0.0).is_err());
        assert!(Optimizer::<f64>::adam(-1.0).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = scalar_param(0.0, 3.0);
        let mut b = scalar_param(0.0, 4.0);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(before, 5.0);
        let after = (a.grad.data()[0].powi(2) + b.grad.data()[0].powi(2)).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}

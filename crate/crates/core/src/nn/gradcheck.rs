//! Finite-difference audit of analytic gradients.

use super::network::{Network, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference step used by every audit in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Anything exposing an ordered list of trainable parameters.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self)
    where
        T: Scalar,
    {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }
}

impl<T: Scalar> Parameterized<T> for Network<T> {
    fn params(&self) -> Vec<&Param<T>> {
        Network::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Network::params_mut(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR)
}

/// Compares the gradient accumulated by `analytic` against central
/// differences of `numeric` for every parameter entry.
///
/// `analytic` must leave `d loss / d param` in the accumulators (they are
/// zeroed first); `numeric` must evaluate the same loss without side effects.
pub fn audit<T, M>(
    model: &mut M,
    mut analytic: impl FnMut(&mut M) -> Result<T>,
    mut numeric: impl FnMut(&M) -> Result<T>,
    tolerance: f64,
) -> Result<GradReport>
where
    T: Scalar,
    M: Parameterized<T>,
{
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    model.zero_grad();
    let loss = analytic(model)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at unperturbed parameters".into()));
    }
    let grads: Vec<Tensor<T>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let h = T::lit(FD_STEP);
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        pass: true,
    };
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let original = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = original + h;
            let plus = numeric(model)?;
            model.params_mut()[pi].value.data_mut()[j] = original - h;
            let minus = numeric(model)?;
            model.params_mut()[pi].value.data_mut()[j] = original;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss with parameter {pi} entry {j} perturbed"
                )));
            }
            let fd = ((plus - minus) / (h + h)).to_f64_lossy();
            let err = relative_error(grad.data()[j].to_f64_lossy(), fd);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
            }
        }
    }
    report.pass = report.max_rel_error <= tolerance;
    Ok(report)
}

/// Audits a single network under a loss on its output. `loss_fn` returns the
/// loss value and its gradient with respect to the network output.
pub fn grad_check<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    loss_fn: impl Fn(&Tensor<T>) -> Result<(T, Tensor<T>)>,
    tolerance: f64,
) -> Result<GradReport> {
    audit(
        net,
        |n| {
            let out = n.forward(input)?;
            let (value, grad) = loss_fn(&out)?;
            n.backward(&grad)?;
            Ok(value)
        },
        |n| Ok(loss_fn(&n.predict(input)?)?.0),
        tolerance,
    )
}

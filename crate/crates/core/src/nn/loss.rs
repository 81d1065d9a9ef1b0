use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean over all elements of the squared difference.
pub fn mse<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("mse", target.shape(), prediction.shape()));
    }
    if prediction.is_empty() {
        return Ok(T::zero());
    }
    let total: T = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(total / T::lit(prediction.len() as f64))
}

/// Gradient of [`mse`] with respect to `prediction`, scaled by `weight`.
pub fn mse_grad<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>, weight: T) -> Result<Tensor<T>> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("mse_grad", target.shape(), prediction.shape()));
    }
    let scale = weight * T::lit(2.0) / T::lit(prediction.len().max(1) as f64);
    let data = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| scale * (p - t))
        .collect();
    Tensor::new(prediction.shape().to_vec(), data)
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(T::exp).collect()
}

/// Entropy (nats) of the softmax distribution over `logits`.
pub fn softmax_entropy<T: Scalar>(logits: &[T]) -> T {
    let logp = log_softmax(logits);
    let h = -logp.iter().map(|&lp| lp.exp() * lp).sum::<T>();
    h.max(T::zero())
}

/// `dH/dz_i = -p_i (log p_i + H)`.
pub fn softmax_entropy_grad<T: Scalar>(logits: &[T]) -> Vec<T> {
    let logp = log_softmax(logits);
    let h = -logp.iter().map(|&lp| lp.exp() * lp).sum::<T>();
    logp.iter().map(|&lp| -(lp.exp()) * (lp + h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = Tensor::row(vec![1.0, 2.0, 3.0]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let p = Tensor::row(vec![1.0, 2.0]);
        let t = Tensor::row(vec![1.0, 4.0]);
        assert_eq!(mse(&p, &t).unwrap(), 2.0);
        assert!(mse(&p, &a).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p: Vec<f64> = (0..37).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..37).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..37 {
            let d = p[i] - t[i];
            acc += d * d;
        }
        acc /= 37.0;
        let got = mse(&Tensor::row(p), &Tensor::row(t)).unwrap();
        assert!((got - acc).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let uniform = softmax_entropy(&[0.3f64; 4]);
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_entropy(&[1e6f64, 0.0, 0.0]) < 1e-12);

        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let mut oracle = 0.0;
        for v in z {
            let p = v.exp() / denom;
            oracle -= p * p.ln();
        }
        assert!((softmax_entropy(&z) - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_grad_matches_finite_differences() {
        let z = [0.4f64, -1.2, 2.0, 0.1];
        let g = softmax_entropy_grad(&z);
        for i in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (softmax_entropy(&zp) - softmax_entropy(&zm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&z);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let h = softmax_entropy(&z);
            prop_assert!(h >= 0.0 && h <= (z.len() as f64).ln() + 1e-12);
        }
    }
}

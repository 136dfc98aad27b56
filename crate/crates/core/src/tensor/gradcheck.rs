//! Central finite differences: the gradient oracle every analytic backward
//! pass is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)` per element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite_diff_grad: eps must be > 0, got {eps}")));
    }
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for idx in 0..x.numel() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Value(
                "finite_diff_grad: non-finite function value".into(),
            ));
        }
        grad.data_mut()[idx] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst per-element relative error between two gradients, with a unit
/// absolute floor so near-zero entries compare absolutely.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fill_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_of_half_norm_squared_is_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::zeros([1, 2, 3, 3]);
        fill_uniform(&mut x, 2.0, &mut rng);
        let g = finite_diff_grad(
            |t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&g, &x) < 1e-9);
    }

    #[test]
    fn bad_eps_rejected() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_function_value_rejected() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    }
}

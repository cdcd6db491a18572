//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the engine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element `i`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps elements whose true gradient is ~0 from dominating with
/// pure rounding noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.3, -1.0, 4.0, 9.5]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::full([1, 1, 1, 1], 3.0);
        let g = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::full([1, 1, 1, 2], 0.0);
        let r = finite_difference_gradient(|t| Ok(1.0 / t.data()[1]), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { index: 0 })));
    }
}

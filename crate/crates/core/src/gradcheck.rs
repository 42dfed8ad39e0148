//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences of step `eps` and returns the worst per-entry relative error.
///
/// `f` maps a parameter tensor to `(value, gradient)`; only the gradient
/// at `params` itself is used.
pub fn grad_check<F>(mut f: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> (f64, Tensor),
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be > 0")));
    }
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value} at base point")));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} differs from parameters {:?}",
            analytic.shape(),
            params.shape()
        )));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let base = params.data()[i];
        probe.data_mut()[i] = base + eps;
        let (plus, _) = f(&probe);
        probe.data_mut()[i] = base - eps;
        let (minus, _) = f(&probe);
        probe.data_mut()[i] = base;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value near entry {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = Prng::new(1);
        let w = Tensor::gaussian(&[10], 0.0, 1.0, &mut rng).unwrap();
        let err = grad_check(
            |p| {
                let v = p.data().iter().map(|x| x * x).sum();
                let g = Tensor::from_vec(p.shape(), p.data().iter().map(|x| 2.0 * x).collect()).unwrap();
                (v, g)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn constant_function() {
        let w = Tensor::filled(&[4], 0.3);
        let err = grad_check(|p| (7.0, Tensor::zeros(p.shape())), &w, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        let w = Tensor::filled(&[2], 1.0);
        assert!(grad_check(|p| (f64::NAN, Tensor::zeros(p.shape())), &w, 1e-5).is_err());
        assert!(grad_check(|p| (0.0, Tensor::zeros(p.shape())), &w, 0.0).is_err());
    }
}

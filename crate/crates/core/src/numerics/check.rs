//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};

/// Central finite-difference estimate of the gradient of a scalar function.
///
/// Each coordinate is probed at `x ± eps`; a non-finite function value at a
/// probe point is reported with the offending coordinate.
pub fn finite_diff_gradient<E, F>(mut f: F, x: &Tensor<E>, eps: f64) -> Result<Tensor<E>>
where
    E: Scalar,
    F: FnMut(&Tensor<E>) -> E,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + E::from_f64(eps);
        let plus = f(&probe);
        probe.data_mut()[i] = orig - E::from_f64(eps);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Validation(format!(
                "finite_diff_gradient: non-finite probe at coordinate {i} (f+ = {plus:?}, f- = {minus:?})"
            )));
        }
        grad.data_mut()[i] = E::from_f64((plus.to_f64() - minus.to_f64()) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error between analytic and numeric gradients, suitable for
/// asserting `rel < tol`. Near-zero pairs compare absolutely.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

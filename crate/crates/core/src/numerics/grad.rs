use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, same shape as `x`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max elementwise error of `analytic` against `numeric`, relative to the
/// larger of their magnitudes (floored at 1 to keep near-zero gradients absolute).
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let diff = analytic.max_abs_diff(numeric)?;
    Ok(diff / analytic.max_abs().max(numeric.max_abs()).max(1.0))
}

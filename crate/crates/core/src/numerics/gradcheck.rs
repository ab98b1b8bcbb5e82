use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function.
pub fn numerical_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check objective".into(),
                index: i,
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// Largest per-coordinate relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(numeric: &Tensor, analytic: &Tensor) -> Result<f64> {
    if numeric.shape() != analytic.shape() {
        return Err(Error::shape("grad_check", numeric.shape(), analytic.shape()));
    }
    Ok(numeric
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Compares `analytic_grad` against central differences of `f` at `x`
/// using the default step, returning the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, analytic_grad: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let numeric = numerical_gradient(f, x, DEFAULT_STEP)?;
    max_relative_error(&numeric, analytic_grad)
}

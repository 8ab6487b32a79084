//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the supplied forward closure; it never looks at
//! the tape, so it stays independent of the analytic backward path it
//! validates.

use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Central finite-difference gradient of a scalar function at `inputs[which]`.
pub fn central_diff(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    inputs: &[Tensor],
    which: usize,
    step: f64,
) -> Result<Tensor> {
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += step;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= step;
        grad.data_mut()[i] = (f(&plus)? - f(&minus)?) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: `|a - n|_inf / max(1, |a|_inf, |n|_inf)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    diff / scale
}

/// Assert-style helper: checks every input of `f` against finite differences.
pub fn check_gradients(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    analytic: &dyn Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    inputs: &[Tensor],
) -> Result<f64> {
    let grads = analytic(inputs)?;
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let numeric = central_diff(f, inputs, which, FD_STEP)?;
        worst = worst.max(relative_error(&grads[which], &numeric));
    }
    Ok(worst)
}

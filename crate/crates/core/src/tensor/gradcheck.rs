//! Central finite differences, the test oracle for every analytic backward.

use super::Tensor;
use crate::error::{Error, Result};

/// Output of a function under finite-difference probing; must be one value.
pub trait ScalarOutput {
    fn into_scalar(self) -> Result<f64>;
}

impl ScalarOutput for f64 {
    fn into_scalar(self) -> Result<f64> {
        Ok(self)
    }
}

impl ScalarOutput for Tensor {
    fn into_scalar(self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Dimension {
                op: "finite_difference_grad",
                msg: format!("function output has shape {:?}, expected a scalar", self.shape()),
            });
        }
        Ok(self.item())
    }
}

impl<T: ScalarOutput> ScalarOutput for Result<T> {
    fn into_scalar(self) -> Result<f64> {
        self.and_then(ScalarOutput::into_scalar)
    }
}

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference_grad<F, R>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> R,
    R: ScalarOutput,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe).into_scalar()?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe).into_scalar()?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Relative error of two gradients, `max|a−b| / max(max|a|, max|b|)`.
///
/// Normalising by the gradient's overall scale keeps near-zero entries from
/// dominating the figure. Returns 0 when both gradients are exactly zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

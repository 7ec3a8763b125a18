//! Central finite differences, the independent oracle used to verify
//! reverse-mode gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step used by the gradient checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Maximum relative error accepted when comparing analytic gradients to
/// central differences.
pub const DEFAULT_REL_TOL: f64 = 1e-4;

/// Denominator floor for the relative error: entries whose gradients are both
/// below this magnitude are effectively compared absolutely (|a - b| <= tol *
/// floor), which absorbs finite-difference noise around zero.
pub const REL_FLOOR: f64 = 1e-4;

/// Gradient of scalar-valued `f` at `x` by central differences.
pub fn central_diff_grad<F>(x: &Tensor<f64>, step: f64, mut f: F) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Relative L2 distance `|a - b|_2 / max(|b|_2, floor)` over flattened data.
pub fn rel_l2_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(floor)
}

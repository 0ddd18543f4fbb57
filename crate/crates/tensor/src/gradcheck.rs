//! Central finite differences. Only forward evaluations are used here, so the
//! estimates are independent of every backward rule in [`crate::graph`].

use crate::float::Float;
use crate::tensor::Tensor;

/// Estimates `d f / d x` elementwise with the central difference
/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference<T: Float>(mut f: impl FnMut(&Tensor<T>) -> f64, x: &Tensor<T>, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let plus = f(&probe);
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps entries whose true gradient is zero from dividing
/// finite-difference noise by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

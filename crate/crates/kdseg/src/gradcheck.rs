//! Central finite-difference gradients, used by the test suites to check
//! the tape's backward rules. Runs in f64; the default step is 1e-4.

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` w.r.t. every element of `x`.
///
/// `f` must evaluate the full forward pass from scratch; it is called twice
/// per coordinate and must not retain state between calls.
pub fn central_difference<F>(mut f: F, x: &Tensor<f64>, step: f64) -> Vec<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grads = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grads.push((up - down) / (2.0 * step));
    }
    grads
}

/// Largest relative error between two gradient vectors; denominators are
/// floored so near-zero coordinates compare absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

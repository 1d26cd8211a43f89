//! Central finite-difference oracle for backward passes.
//!
//! Used by the `verify` CLI command and by tests. Deliberately knows nothing
//! about the analytic backward implementations it is used to check.

use crate::tensor::{Real, Tensor};

/// Numerical gradient of a scalar function at `x` by central differences:
/// g_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn finite_diff_grad<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> f64,
    x: &Tensor<F>,
    eps: f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = F::from_f64(orig.to_f64() + eps);
        let plus = f(&probe);
        probe.data_mut()[i] = F::from_f64(orig.to_f64() - eps);
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst-case elementwise error, relative for large entries and absolute for
/// small ones: max_i |a_i - n_i| / max(1, |a_i|, |n_i|).
pub fn max_rel_err<F: Real>(analytic: &[F], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let a = a.to_f64();
            (a - n).abs() / a.abs().max(n.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

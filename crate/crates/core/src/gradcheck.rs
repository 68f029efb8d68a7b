//! Central-difference gradient checking.
//!
//! `numeric_grad` treats the supplied closure as a black box, so it is an
//! independent oracle for any analytic gradient: perturb one coordinate,
//! re-run the full forward pass, difference the scalar outputs.

/// Central-difference gradient of `f` at `x` with the given step.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between an analytic gradient and the
/// central-difference gradient of `f` at `x`.
pub fn max_rel_err(
    f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let numeric = numeric_grad(f, x, step);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

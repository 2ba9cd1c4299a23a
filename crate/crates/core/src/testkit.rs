//! Shared helpers for unit and integration tests: a central finite-difference
//! oracle and float comparison utilities. Not part of the public API surface.

#![doc(hidden)]

/// Central-difference gradient of a scalar function of a flat input vector.
pub fn finite_difference_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let hi = f(&probe);
        probe[i] = x[i] - h;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Relative error |a - b| / max(1, |b|), reduced over the vectors by max.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "length mismatch in comparison");
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / f64::max(1.0, b.abs()))
        .fold(0.0, f64::max)
}

pub fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {}: {} vs {} (tol {})",
            i,
            a,
            e,
            tol
        );
    }
}

//! Numeric verification helpers: central finite differences and tolerance
//! assertions. Shared by the unit suites here and the acceptance suite in the
//! CLI crate; the finite-difference path is independent of the tape, so it can
//! stand as an oracle against it.

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (diff {})",
        (actual - expected).abs()
    );
}

/// Central-difference gradient of `f` at `point`, one coordinate at a time.
pub fn central_diff_grad<F: Fn(&[f64]) -> f64>(f: &F, point: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

//! Central finite-difference gradient verification.
//!
//! The checker is deliberately independent of the tape: it only needs a
//! closure mapping a flat parameter buffer to a scalar, so it can validate
//! any differentiation path against a numeric oracle.

/// Central finite-difference gradient of `f` at `x`: (f(x+e) - f(x-e)) / 2e
/// per coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Largest per-element relative error between two gradient buffers, with the
/// denominator floored at 1e-6 so near-zero entries compare absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x^2), df/dx = 2x
        let x = vec![1.0, -2.0, 0.5];
        let fd = central_difference(|v| v.iter().map(|a| a * a).sum(), &x, 1e-5);
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_relative_error(&analytic, &fd) < 1e-8);
    }
}

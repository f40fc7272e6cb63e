//! Central finite-difference gradient checking.
//!
//! The numeric side of every gradient test in this crate: independent of the
//! reverse-mode implementation it validates.

/// Central difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest relative error between two gradient vectors. The denominator is
/// clamped so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![1.0, -2.0, 0.5];
        let g = central_diff(&f, &x, 1e-6);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&g, &expect, 1e-8) < 1e-8);
    }
}

//! Numerical differentiation oracles for validating analytic gradients.
//! These never touch the tape's backward rules: callers supply a closure
//! that re-runs the forward computation from scratch for a perturbed
//! coordinate value, so agreement is evidence, not circularity.

/// Central-difference derivative of `f` at `v0`. `f(v)` must set the
/// coordinate under test to `v` and return the scalar output; the closure is
/// invoked once more with `v0` afterwards to restore state.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, v0: f64, step: f64) -> f64 {
    let fp = f(v0 + step);
    let fm = f(v0 - step);
    f(v0);
    (fp - fm) / (2.0 * step)
}

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|, floor).
/// Below the floor the comparison degrades gracefully to an absolute one,
/// which is all a central difference can certify for near-zero derivatives.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_polynomial_derivative() {
        // d/dv (v^3) at 2 is 12; cubic truncation error vanishes for central diffs
        // only at order step^2, so allow 1e-9.
        let d = central_diff(|v| v * v * v, 2.0, 1e-5);
        assert!((d - 12.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn central_diff_restores_state() {
        let mut current = f64::NAN;
        central_diff(
            |v| {
                current = v;
                v
            },
            1.5,
            1e-3,
        );
        assert_eq!(current, 1.5);
    }

    #[test]
    fn rel_err_uses_floor_for_tiny_values() {
        assert_eq!(rel_err(0.0, 1e-12, 1e-3), 1e-9);
        assert!((rel_err(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
    }
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±eps` probes crossed a kink of the function.
    pub skipped: usize,
}

/// Compares `analytic` against central finite differences of `f` at `point`.
///
/// `f` returns the function value and a fingerprint of its piecewise
/// region (e.g. the relu activation pattern; return a constant for smooth
/// functions). A coordinate whose probes land in a different region than the
/// base point is skipped: finite differences are meaningless across a kink.
/// `f` is left evaluated at `point` on return.
pub fn grad_check<F>(mut f: F, analytic: &[f32], point: &[f32], eps: f32) -> GradCheckReport
where
    F: FnMut(&[f32]) -> (f64, u64),
{
    assert_eq!(analytic.len(), point.len(), "gradient and point differ in length");
    let (_, base_region) = f(point);
    let mut probe = point.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for i in 0..point.len() {
        let x = point[i];
        probe[i] = x + eps;
        let (plus, r_plus) = f(&probe);
        probe[i] = x - eps;
        let (minus, r_minus) = f(&probe);
        probe[i] = x;
        if r_plus != base_region || r_minus != base_region {
            skipped += 1;
            continue;
        }
        // The step actually taken in f32 may differ slightly from eps.
        let h = (x + eps) as f64 - (x - eps) as f64;
        let numeric = (plus - minus) / h;
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        max_rel_error = max_rel_error.max(err);
        checked += 1;
    }
    f(point);
    GradCheckReport {
        max_rel_error,
        checked,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = [0.5f32, -2.0, 3.0];
        let point = [1.0f32, 2.0, -1.0];
        let r = grad_check(
            |p| (p.iter().zip(&w).map(|(a, b)| (*a as f64) * (*b as f64)).sum(), 0),
            &w,
            &point,
            1e-3,
        );
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn quadratic_central_difference() {
        // d/dx x^2 at 3 is 6; the central difference of a quadratic is exact
        // up to rounding of the probe points.
        let r = grad_check(|p| ((p[0] as f64).powi(2), 0), &[6.0], &[3.0], 1e-3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let wrong = grad_check(|p| ((p[0] as f64).powi(2), 0), &[6.1], &[3.0], 1e-3);
        assert!(wrong.max_rel_error > 1e-2);
    }

    #[test]
    fn kink_crossing_coordinates_are_skipped() {
        let r = grad_check(
            |p| ((p[0] as f64).abs(), u64::from(p[0] > 0.0)),
            &[1.0],
            &[1e-4],
            1e-3,
        );
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 0);
    }
}

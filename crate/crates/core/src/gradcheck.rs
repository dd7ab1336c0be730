//! Central finite-difference oracle for gradient verification.

/// Central differences `(f(x + h·e_i) - f(x - h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central differences on a subset of coordinates; entries not listed stay 0.
pub fn finite_diff_grad_at<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for &i in coords {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between an analytic gradient and the finite-difference
/// oracle over the given coordinates. The denominator is floored so that
/// coordinates where both gradients vanish do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], coords: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for &i in coords {
        let denom = numeric[i].abs().max(analytic[i].abs()).max(1e-6);
        let err = (analytic[i] - numeric[i]).abs() / denom;
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = vec![0.3, -1.2, 2.0];
        let g = finite_diff_grad(|v| v.iter().sum(), &x, 1e-6);
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|v| v[0] * v[0], &[3.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn detects_wrong_analytic_gradient() {
        // negative control: a deliberately wrong gradient must fail loudly
        let x = vec![0.5, -0.25];
        let numeric = finite_diff_grad(|v| v[0] * v[0] + v[1], &x, 1e-6);
        let wrong = vec![2.0 * x[0] * 1.5, 1.0];
        let err = max_rel_error(&wrong, &numeric, &[0, 1]);
        assert!(err > 1e-2, "perturbed gradient should be flagged, err={err}");
    }
}

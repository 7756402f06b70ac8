/// Largest relative discrepancy `|g_fd - g| / (|g_fd| + |g| + 1e-12)` between
/// central finite differences of `loss` and the analytic gradient, over all
/// coordinates.
pub fn grad_check(
    loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let coords: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(loss, params, analytic, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords(
    mut loss: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss(&p);
        p[i] = orig - h;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs() + 1e-12);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm_sq(p: &[f64]) -> f64 {
        0.5 * p.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn quadratic_is_exact() {
        let p = vec![0.3, -1.7, 2.5, 0.9];
        let err = grad_check(half_norm_sq, &p, &p, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_corrupted_gradient() {
        let p = vec![0.3, -1.7, 2.5, 0.9];
        let mut g = p.clone();
        g[2] *= 2.0;
        assert!(grad_check(half_norm_sq, &p, &g, 1e-5) > 0.1);
    }
}

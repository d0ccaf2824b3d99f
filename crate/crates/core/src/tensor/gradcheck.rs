/// Central-difference gradient of `f` at `x`: `(f(x+e) - f(x-e)) / 2e` per
/// coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from dividing round-off by round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::sigmoid;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero() {
        let g = finite_diff_grad(|x| sigmoid(x[0]), &[0.0], 1e-5);
        assert!((g[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-15);
    }
}

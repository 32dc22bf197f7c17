use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {j}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_grad(|_| 3.5, &[0.1, -4.0, 9.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn negative_cosine_matches_analytic_gradient() {
        // d/dx [-cos(x, r)] = -(r/(|x||r|) - cos(x,r) x/|x|^2); at x=[1,0], r=[1,1]
        // this is [0, -1/sqrt(2)].
        let r = [1.0, 1.0];
        let f = |x: &[f64]| {
            let dot = x[0] * r[0] + x[1] * r[1];
            -dot / ((x[0] * x[0] + x[1] * x[1]).sqrt() * 2f64.sqrt())
        };
        let g = finite_diff_grad(f, &[1.0, 0.0], 1e-5).unwrap();
        assert!(g[0].abs() < 1e-5);
        assert!((g[1] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5, "{g:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
        let err = finite_diff_grad(|x| (x[0] - 1.0).ln(), &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}

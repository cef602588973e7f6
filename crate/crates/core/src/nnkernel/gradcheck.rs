//! Finite-difference gradient checking. The numeric side is central
//! differences at 64-bit precision; callers supply the loss as a closure over
//! a flat parameter vector, so any layer or full model can be checked.

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `theta`. `theta` is restored to its
/// original values before returning.
pub fn finite_diff(f: &mut impl FnMut(&[f64]) -> f64, theta: &mut Vec<f64>, step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let saved = theta[i];
        theta[i] = saved + step;
        let plus = f(theta);
        theta[i] = saved - step;
        let minus = f(theta);
        theta[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Elementwise |a - n| / max(1, |a|, |n|), maximized. Gradients below 1 are
/// compared absolutely so finite-difference noise on tiny entries does not
/// dominate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = sum x_i^2, grad = 2x
        let mut theta = vec![0.5, -1.25, 3.0];
        let mut f = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        let analytic: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        assert!(max_rel_error(&analytic, &numeric) < 1e-9);
        assert_eq!(theta, vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut theta = vec![0.5, -1.25, 3.0];
        let mut f = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        let mut corrupted: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        corrupted[1] += 0.05;
        assert!(max_rel_error(&corrupted, &numeric) > 1e-2);
    }
}

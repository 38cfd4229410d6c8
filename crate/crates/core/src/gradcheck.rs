//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Smallest denominator used when forming relative errors.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + eps;
        let plus = f(&x)?;
        x[i] = point[i] - eps;
        let minus = f(&x)?;
        x[i] = point[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with a
/// central-difference estimate and reports the worst relative error.
///
/// `loss_fn` maps a flat parameter vector to `(loss, analytic gradient)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = loss_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            (params.len(), 1),
            (analytic.len(), 1),
        ));
    }
    let numeric = numeric_gradient(|p| loss_fn(p).map(|(v, _)| v), params, eps)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_relative_error || err.is_nan() {
            report = GradCheckReport {
                max_relative_error: if err.is_nan() { f64::INFINITY } else { err },
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_matches_closely() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let loss = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            let v = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            Ok((v, x.to_vec()))
        };
        let report = grad_check(loss, &[1.0, 2.0, -0.5, 0.25], 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let loss = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((w[0] * w[0], vec![3.0 * w[0]]))
        };
        let report = grad_check(loss, &[1.3], 1e-5).unwrap();
        assert!(report.max_relative_error > 1e-2);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-13, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(numeric_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }
}

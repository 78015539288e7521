//! Finite-difference oracles for verifying tape gradients.
//!
//! The numeric side never touches the tape internals: a check re-runs the
//! whole forward computation from scratch for every perturbed coordinate, so
//! agreement means the recorded backward pass matches the function the
//! forward pass actually computes.

/// Central finite difference of a scalar function, one coordinate at a time.
///
/// `f` must be a pure function of `x`; it is called `2 * x.len()` times.
pub fn central_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work);
        work[i] = orig - eps;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Worst disagreement between an analytic gradient and a numeric reference.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / (|numeric_i| + floor)`
    pub max_rel_err: f64,
    /// Coordinate attaining the max, for debugging failures.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative-error floor: keeps near-zero reference entries from exploding the
/// ratio while still catching sign flips and missing terms.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / (n.abs() + REL_ERR_FLOOR);
        if rel > report.max_rel_err || i == 0 {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report
}

//! Central-difference gradient verification.

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub numeric: f64,
    pub analytic: f64,
}

/// Compares `analytic` against `(f(x + eps) - f(x - eps)) / 2 eps` for every
/// coordinate of `x`. Relative error uses `max(|a|, |b|, 1e-8)` as the
/// denominator.
pub fn grad_check<F>(mut loss: F, analytic: &[f64], x: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), x.len(), "gradient and point lengths differ");
    let mut point = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        numeric: 0.0,
        analytic: 0.0,
    };
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let up = loss(&point);
        point[i] = orig - eps;
        let down = loss(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
        if rel > report.max_rel_err || i == 0 {
            report = GradCheckReport {
                max_rel_err: rel.max(report.max_rel_err),
                worst_index: i,
                numeric,
                analytic: a,
            };
        }
    }
    report
}

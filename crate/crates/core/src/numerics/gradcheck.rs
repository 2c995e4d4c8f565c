use super::Tensor;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `point`,
/// one coordinate at a time, and reports the worst relative error.
pub fn check_gradient(f: impl Fn(&Tensor) -> f64, analytic: &Tensor, point: &Tensor, h: f64) -> GradCheck {
    assert!(h > 0.0, "step must be positive");
    assert_eq!(analytic.shape(), point.shape(), "gradient and point shapes differ");
    let mut probe = point.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}

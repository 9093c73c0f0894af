//! Small text-output helpers shared by the CSV writers.

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Empty cell for `None`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt17).unwrap_or_default()
}

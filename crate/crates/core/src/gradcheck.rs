//! Central finite-difference audit of analytic gradients.

/// Step used by every gradient audit.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, floor)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compare the analytic gradient of `f` at `x` with central differences.
///
/// `f` returns `(value, gradient)`; only its value is used at the shifted
/// points. `floor` keeps the ratio meaningful when both gradients vanish.
pub fn check<F>(f: F, x: &[f64], step: f64, floor: f64) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, g) = f(x);
    let mut buf = x.to_vec();
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        buf[i] = x[i] + step;
        let up = f(&buf).0;
        buf[i] = x[i] - step;
        let down = f(&buf).0;
        buf[i] = x[i];
        num.push((up - down) / (2.0 * step));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
    let (ga, gn) = (norm(&g), norm(&num));
    GradCheck { rel_error: norm(&diff) / ga.max(gn).max(floor), analytic_norm: ga, numeric_norm: gn }
}

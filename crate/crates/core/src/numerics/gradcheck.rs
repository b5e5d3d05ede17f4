use crate::{Error, Result};

/// Compares an analytic gradient against central finite differences and
/// returns the largest per-coordinate relative error
/// `|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn finite_diff_check<F>(
    mut loss: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic_grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "finite_diff_check",
            expected: params.len(),
            found: analytic_grad.len(),
        });
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at probe point for coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * step);
        let an = analytic_grad[i];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

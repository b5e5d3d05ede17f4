use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Closed-form `KL(N(mu_q, diag var_q) || N(mu_p, diag var_p))`.
pub fn gauss_kl_diag(
    mu_q: ArrayView1<f64>,
    var_q: ArrayView1<f64>,
    mu_p: ArrayView1<f64>,
    var_p: ArrayView1<f64>,
) -> Result<f64> {
    let n = mu_q.len();
    for (len, context) in [
        (var_q.len(), "gauss_kl_diag var_q"),
        (mu_p.len(), "gauss_kl_diag mu_p"),
        (var_p.len(), "gauss_kl_diag var_p"),
    ] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context,
                expected: n,
                found: len,
            });
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        let (vq, vp) = (var_q[i], var_p[i]);
        if !(vq > 0.0) {
            return Err(Error::NonPositiveVariance {
                index: i,
                value: vq,
            });
        }
        if !(vp > 0.0) {
            return Err(Error::NonPositiveVariance {
                index: i,
                value: vp,
            });
        }
        let d = mu_p[i] - mu_q[i];
        kl += vq / vp + d * d / vp - 1.0 + (vp / vq).ln();
    }
    Ok(0.5 * kl)
}

/// Pearson correlation with an explicit degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Set when either input is constant; `value` is then `0`.
    pub degenerate: bool,
}

/// Two-pass Pearson correlation. Constant inputs produce `0` with the
/// degeneracy flag set rather than an error.
pub fn pearson(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<Correlation> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            context: "pearson",
            expected: n,
            found: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 2 observations, got {n}"
        )));
    }
    let mx = x.sum() / n as f64;
    let my = y.sum() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(Correlation {
        value: r.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

//! Dense linear algebra, probability kernels and validation utilities.
//!
//! Everything here is deterministic and allocation-light; the heavier
//! modules (model, eval, baselines) are written on top of these kernels.

mod assignment;
mod gradcheck;
mod linalg;
mod rng;
mod stats;

pub use assignment::{linear_sum_assignment, Assignment};
pub use gradcheck::finite_diff_check;
pub use linalg::{
    cholesky_solve, condition_number, determinant, ols_r2, rank, symmetric_eigen, unit_lower_solve,
    unit_lower_solve_transposed, OLS_JITTER,
};
pub use rng::{Purpose, RngState, RngStream};
pub use stats::{gauss_kl_diag, pearson, Correlation};

use ndarray::{Array1, Array2};

/// Row-major dense matrix of `f64`.
pub type Matrix = Array2<f64>;
/// Dense vector of `f64`.
pub type Vector = Array1<f64>;

/// Column means of a matrix; an empty matrix yields zeros.
pub fn column_means(m: &Matrix) -> Vector {
    if m.nrows() == 0 {
        return Vector::zeros(m.ncols());
    }
    m.sum_axis(ndarray::Axis(0)) / m.nrows() as f64
}

pub(crate) fn ensure_finite<'a>(
    values: impl IntoIterator<Item = &'a f64>,
    what: &str,
) -> crate::Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::Error::NonFinite(what.to_string()))
    }
}

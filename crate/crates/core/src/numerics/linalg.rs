use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

/// Ridge term added to the Gram diagonal in [`ols_r2`].
pub const OLS_JITTER: f64 = 1e-8;

/// Solves `(I - lambda) z = b` by forward substitution.
///
/// Only the strictly-lower part of `lambda` is read; the diagonal and the
/// upper triangle are treated as zero.
pub fn unit_lower_solve(lambda: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = b.len();
    check_square_of(lambda, n, "unit_lower_solve")?;
    let mut z = Array1::zeros(n);
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc += lambda[[i, j]] * z[j];
        }
        z[i] = acc;
    }
    Ok(z)
}

/// Solves `(I - lambda)^T y = g` by back substitution (the adjoint of
/// [`unit_lower_solve`]).
pub fn unit_lower_solve_transposed(
    lambda: ArrayView2<f64>,
    g: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let n = g.len();
    check_square_of(lambda, n, "unit_lower_solve_transposed")?;
    let mut y = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut acc = g[i];
        for j in (i + 1)..n {
            acc += lambda[[j, i]] * y[j];
        }
        y[i] = acc;
    }
    Ok(y)
}

fn check_square_of(m: ArrayView2<f64>, n: usize, context: &'static str) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            found: m.nrows(),
        });
    }
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            found: m.ncols(),
        });
    }
    Ok(())
}

/// Solves `a x = b` for symmetric positive definite `a` (multiple right-hand
/// sides as columns of `b`). Fails with [`Error::RankDeficient`] when a pivot is
/// not positive.
pub fn cholesky_solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if b.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "cholesky_solve",
            expected: n,
            found: b.nrows(),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    let scale = a.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 1e-14 * scale) {
            return Err(Error::RankDeficient);
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Fits `targets = predictors * W + b` by least squares and returns the pooled
/// coefficient of determination `1 - SS_res / SS_tot`.
///
/// The intercept is handled by centering; the Gram matrix of the centered
/// predictors gets [`OLS_JITTER`] on its diagonal. Constant targets yield `0`.
pub fn ols_r2(predictors: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let (n, p) = predictors.dim();
    if targets.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "ols_r2 rows",
            expected: n,
            found: targets.nrows(),
        });
    }
    if n <= p {
        return Err(Error::InvalidArgument(format!(
            "ols_r2 needs more rows than predictors ({n} <= {p})"
        )));
    }
    super::ensure_finite(predictors.iter(), "ols_r2 predictors")?;
    super::ensure_finite(targets.iter(), "ols_r2 targets")?;

    let xm = predictors.mean_axis(Axis(0)).expect("n > 0");
    let tm = targets.mean_axis(Axis(0)).expect("n > 0");
    let xc = &predictors - &xm;
    let tc = &targets - &tm;
    let ss_tot: f64 = tc.iter().map(|v| v * v).sum();
    if ss_tot == 0.0 {
        return Ok(0.0);
    }
    if p == 0 {
        return Ok(0.0);
    }
    let mut gram = xc.t().dot(&xc);
    for i in 0..p {
        gram[[i, i]] += OLS_JITTER;
    }
    let rhs = xc.t().dot(&tc);
    let w = cholesky_solve(gram.view(), rhs.view())?;
    let resid = &tc - &xc.dot(&w);
    let ss_res: f64 = resid.iter().map(|v| v * v).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Numerical rank by Gaussian elimination with full (row and column) pivoting.
/// Pivots below `tol * max_pivot` count as zero.
pub fn rank(m: ArrayView2<f64>, tol: f64) -> usize {
    let mut a = m.to_owned();
    let (rows, cols) = a.dim();
    let steps = rows.min(cols);
    let mut first_pivot = 0.0f64;
    let mut r = 0;
    for k in 0..steps {
        let mut best = (k, k, 0.0f64);
        for i in k..rows {
            for j in k..cols {
                let v = a[[i, j]].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if k == 0 {
            first_pivot = best.2;
        }
        if best.2 == 0.0 || best.2 <= tol * first_pivot {
            break;
        }
        let (pi, pj, _) = best;
        if pi != k {
            for j in 0..cols {
                a.swap([k, j], [pi, j]);
            }
        }
        if pj != k {
            for i in 0..rows {
                a.swap([i, k], [i, pj]);
            }
        }
        let piv = a[[k, k]];
        for i in (k + 1)..rows {
            let f = a[[i, k]] / piv;
            if f != 0.0 {
                for j in k..cols {
                    a[[i, j]] -= f * a[[k, j]];
                }
            }
        }
        r += 1;
    }
    r
}

/// Determinant by LU factorization with partial pivoting.
pub fn determinant(m: ArrayView2<f64>) -> Result<f64> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: m.ncols(),
        });
    }
    let mut a = m.to_owned();
    let mut det = 1.0;
    for k in 0..n {
        let mut p = k;
        for i in (k + 1)..n {
            if a[[i, k]].abs() > a[[p, k]].abs() {
                p = i;
            }
        }
        if a[[p, k]] == 0.0 {
            return Ok(0.0);
        }
        if p != k {
            for j in 0..n {
                a.swap([k, j], [p, j]);
            }
            det = -det;
        }
        let piv = a[[k, k]];
        det *= piv;
        for i in (k + 1)..n {
            let f = a[[i, k]] / piv;
            for j in k..n {
                a[[i, j]] -= f * a[[k, j]];
            }
        }
    }
    Ok(det)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(m: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: m.ncols(),
        });
    }
    let mut a = m.to_owned();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum();
        let total: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        vectors.column_mut(c).assign(&v.column(i));
    }
    Ok((values, vectors))
}

/// 2-norm condition number of a square matrix (ratio of extreme singular
/// values). Singular matrices give `f64::INFINITY`.
pub fn condition_number(m: ArrayView2<f64>) -> Result<f64> {
    let gram = m.t().dot(&m);
    let (vals, _) = symmetric_eigen(gram.view())?;
    let max = vals[0].max(0.0);
    let min = vals[vals.len() - 1].max(0.0);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((max / min).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn dense_inverse_solve(lambda: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
        // Gauss-Jordan inverse of (I - lambda), independent of substitution.
        let n = b.len();
        let mut a = Array2::<f64>::eye(n) - lambda;
        let mut inv = Array2::<f64>::eye(n);
        for k in 0..n {
            let piv = a[[k, k]];
            for j in 0..n {
                a[[k, j]] /= piv;
                inv[[k, j]] /= piv;
            }
            for i in 0..n {
                if i != k {
                    let f = a[[i, k]];
                    for j in 0..n {
                        a[[i, j]] -= f * a[[k, j]];
                        inv[[i, j]] -= f * inv[[k, j]];
                    }
                }
            }
        }
        inv.dot(b)
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn solve_identity_case() {
        let z =
            unit_lower_solve(Array2::zeros((3, 3)).view(), array![1.0, 2.0, 3.0].view()).unwrap();
        assert_eq!(z, array![1.0, 2.0, 3.0]);
    }

    #[test]
    fn solve_hand_substitution() {
        let l = array![[0.0, 0.0], [0.5, 0.0]];
        let z = unit_lower_solve(l.view(), array![1.0, 1.0].view()).unwrap();
        assert_eq!(z, array![1.0, 1.5]);
    }

    #[test]
    fn solve_matches_dense_inverse() {
        let mut s = 7u64;
        let mut l = Array2::zeros((4, 4));
        for i in 0..4 {
            for j in 0..i {
                l[[i, j]] = lcg(&mut s);
            }
        }
        let b = Array1::from_iter((0..4).map(|_| lcg(&mut s)));
        let z = unit_lower_solve(l.view(), b.view()).unwrap();
        let oracle = dense_inverse_solve(&l, &b);
        for (a, o) in z.iter().zip(oracle.iter()) {
            assert!((a - o).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_ignores_upper_triangle() {
        let l = array![[9.0, 9.0], [0.5, 9.0]];
        let z = unit_lower_solve(l.view(), array![1.0, 1.0].view()).unwrap();
        assert_eq!(z, array![1.0, 1.5]);
    }

    #[test]
    fn solve_rejects_dimension_mismatch() {
        let err = unit_lower_solve(Array2::zeros((3, 3)).view(), array![1.0, 2.0].view());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn transposed_solve_is_adjoint() {
        let mut s = 3u64;
        let n = 6;
        let mut l = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                l[[i, j]] = lcg(&mut s);
            }
        }
        let b = Array1::from_iter((0..n).map(|_| lcg(&mut s)));
        let g = Array1::from_iter((0..n).map(|_| lcg(&mut s)));
        let z = unit_lower_solve(l.view(), b.view()).unwrap();
        let y = unit_lower_solve_transposed(l.view(), g.view()).unwrap();
        assert!((g.dot(&z) - y.dot(&b)).abs() < 1e-10);
    }

    #[test]
    fn rank_basic_cases() {
        assert_eq!(rank(Array2::<f64>::zeros((3, 4)).view(), 1e-10), 0);
        assert_eq!(rank(Array2::<f64>::eye(5).view(), 1e-10), 5);
        let u = array![1.0, -2.0, 3.0];
        let v = array![0.5, 4.0, 1.0, 2.0];
        let outer = Array2::from_shape_fn((3, 4), |(i, j)| u[i] * v[j]);
        assert_eq!(rank(outer.view(), 1e-10), 1);
    }

    #[test]
    fn ols_affine_targets_give_unit_r2() {
        let mut s = 11u64;
        let x = Array2::from_shape_fn((50, 3), |_| lcg(&mut s));
        let w = array![[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]];
        let t = x.dot(&w) + 4.0;
        let r2 = ols_r2(x.view(), t.view()).unwrap();
        assert!((r2 - 1.0).abs() < 1e-8, "{r2}");
    }

    #[test]
    fn ols_permuted_scaled_targets() {
        let mut s = 5u64;
        let x = Array2::from_shape_fn((40, 3), |_| lcg(&mut s));
        let mut t = Array2::zeros((40, 3));
        for i in 0..40 {
            t[[i, 0]] = -2.0 * x[[i, 2]];
            t[[i, 1]] = 0.5 * x[[i, 0]];
            t[[i, 2]] = 7.0 * x[[i, 1]] + 1.0;
        }
        assert!((ols_r2(x.view(), t.view()).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ols_requires_more_rows() {
        let x = Array2::<f64>::zeros((3, 3));
        assert!(ols_r2(x.view(), x.view()).is_err());
    }

    #[test]
    fn ols_duplicate_column_survives_jitter() {
        let mut s = 9u64;
        let base = Array2::from_shape_fn((30, 1), |_| lcg(&mut s));
        let x = ndarray::concatenate![Axis(1), base, base];
        let t = &base * 3.0;
        assert!((ols_r2(x.view(), t.view()).unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn determinant_and_eigen() {
        let m = array![[2.0, 1.0], [1.0, 3.0]];
        assert!((determinant(m.view()).unwrap() - 5.0).abs() < 1e-12);
        let (vals, vecs) = symmetric_eigen(m.view()).unwrap();
        let l1 = (5.0 + 5.0f64.sqrt()) / 2.0;
        assert!((vals[0] - l1).abs() < 1e-12);
        let mv = m.dot(&vecs.column(0));
        for k in 0..2 {
            assert!((mv[k] - l1 * vecs[[k, 0]]).abs() < 1e-10);
        }
        assert!((condition_number(Array2::<f64>::eye(3).view()).unwrap() - 1.0).abs() < 1e-12);
    }
}

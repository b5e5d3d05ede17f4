//! Exact linear sum assignment (Hungarian method, shortest augmenting paths
//! with dual potentials, O(n^3)).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Optimal one-to-one matching of rows to columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `permutation[row] = column`.
    pub permutation: Vec<usize>,
    /// Sum of the original (un-negated) cost entries along the matching.
    pub total_cost: f64,
}

/// Solves the square assignment problem. With `maximize` set the matching
/// maximizes the total instead of minimizing it.
pub fn linear_sum_assignment(cost: ArrayView2<f64>, maximize: bool) -> Result<Assignment> {
    let (rows, cols) = cost.dim();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    super::ensure_finite(cost.iter(), "assignment cost")?;
    let n = rows;
    if n == 0 {
        return Ok(Assignment {
            permutation: Vec::new(),
            total_cost: 0.0,
        });
    }
    let c = |i: usize, j: usize| {
        if maximize {
            -cost[[i, j]]
        } else {
            cost[[i, j]]
        }
    };

    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0usize; n];
    for j in 1..=n {
        permutation[row_of_col[j] - 1] = j - 1;
    }
    let total_cost = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum();
    Ok(Assignment {
        permutation,
        total_cost,
    })
}

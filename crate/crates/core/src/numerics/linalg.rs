//! Small dense and banded linear algebra helpers.

use nalgebra::{DMatrix, DVector};

/// Solves a tridiagonal system in place (Thomas algorithm). `lower[0]` and
/// `upper[n-1]` are ignored. `rhs` is overwritten with the solution.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    debug_assert!(rhs.len() == n && scratch.len() >= n);
    let mut beta = diag[0];
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
}

/// Non-negative least squares `min |Ax - b|, x >= 0` by enumerating active
/// sets. Only meant for a handful of unknowns.
pub fn nnls_small(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let n = a.ncols();
    assert!(n <= 12, "nnls_small is exponential in the number of unknowns");
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let mut x = DVector::zeros(n);
        if !cols.is_empty() {
            let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])]);
            let svd = sub.svd(true, true);
            let Ok(sol) = svd.solve(b, 1e-13) else { continue };
            if sol.iter().any(|&v| v < 0.0) {
                continue;
            }
            for (j, &c) in cols.iter().enumerate() {
                x[c] = sol[j];
            }
        }
        let r = (a * &x - b).norm_squared();
        if best.as_ref().map_or(true, |(_, rb)| r < *rb) {
            best = Some((x, r));
        }
    }
    best
}

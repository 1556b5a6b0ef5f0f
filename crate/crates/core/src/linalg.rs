//! Dense helpers shared by the least-squares fits and the QP solver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Solves `G X = R` for symmetric positive semidefinite `G` (normal equations).
/// Tries Cholesky first and falls back to full-pivot LU; a singular `G` is an error.
pub fn solve_normal(g: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.nrows() != g.ncols() || g.nrows() != rhs.nrows() {
        return Err(Error::Shape(format!(
            "normal matrix {}x{} with right-hand side {}x{}",
            g.nrows(),
            g.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    if let Some(ch) = g.clone().cholesky() {
        let x = ch.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let lu = g.clone().full_piv_lu();
    // Relative pivot test: LU "succeeds" on numerically singular systems otherwise.
    let scale = g.amax().max(f64::MIN_POSITIVE);
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if min_pivot <= scale * 1e-13 * g.nrows() as f64 {
        return Err(Error::Singular(format!(
            "{0}x{0} normal equations are rank deficient; add a ridge penalty",
            g.nrows()
        )));
    }
    lu.solve(rhs).ok_or_else(|| Error::Singular("LU solve failed; add a ridge penalty".into()))
}

/// Largest eigenvalue estimate of a symmetric PSD matrix by power iteration
/// (Rayleigh quotient of the final iterate).
pub fn power_iteration(g: &DMatrix<f64>, iters: usize) -> f64 {
    let n = g.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = nalgebra::DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    x /= x.norm();
    for _ in 0..iters {
        let y = g * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y / norm;
    }
    x.dot(&(g * &x)).max(0.0)
}

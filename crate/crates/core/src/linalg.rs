//! Small dense helpers shared by the Newton solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative pivot threshold below which a symmetric matrix is treated as singular.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Cholesky factor of a symmetric positive-definite matrix with a relative pivot guard.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    factor: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Returns `None` when a pivot falls below `PIVOT_TOLERANCE` times the largest diagonal entry.
    pub fn new(matrix: &DMatrix<f64>) -> Option<Self> {
        let scale = matrix.diagonal().amax();
        if matrix.nrows() > 0 && (!(scale > 0.0) || !scale.is_finite()) {
            return None;
        }
        let factor = Cholesky::new(matrix.clone())?;
        let lower = factor.l_dirty();
        if (0..matrix.nrows()).any(|j| !(lower[(j, j)] * lower[(j, j)] > PIVOT_TOLERANCE * scale)) {
            return None;
        }
        Some(Self { factor })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

pub fn max_abs(values: &DVector<f64>) -> f64 {
    values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Symmetrizes in place by averaging with the transpose.
pub fn symmetrize(matrix: &mut DMatrix<f64>) {
    let dim = matrix.nrows();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let mean = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
            matrix[(i, j)] = mean;
            matrix[(j, i)] = mean;
        }
    }
}

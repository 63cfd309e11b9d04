//! Dense SVD helpers shared by the CI computations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const SVD_MAX_ITERATIONS: usize = 10_000;

/// Singular values of `m`, in no particular order.
pub(crate) fn singular_values(m: &DMatrix<f64>, layer_id: &str) -> Result<Vec<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let svd = nalgebra::SVD::try_new(m.clone(), false, false, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or_else(|| Error::SvdNonConvergence {
            layer_id: layer_id.to_string(),
        })?;
    Ok(svd.singular_values.iter().map(|s| s.abs()).collect())
}

pub(crate) fn nuclear_norm_of(m: &DMatrix<f64>, layer_id: &str) -> Result<f64> {
    Ok(singular_values(m, layer_id)?.iter().sum())
}

/// A `rows × min(rows, cols)` matrix `F` with the property that for every
/// subset `S` of rows, `A[S, :]` and `F[S, :]` have the same singular values.
///
/// For wide `A` this is `Lᵀ` from `Aᵀ = QR`: `A = RᵀQᵀ` and `Qᵀ` has
/// orthonormal rows, so deleting rows of `A` is deleting rows of `Rᵀ`.
/// Tall matrices cannot be compressed this way and are returned as-is.
pub(crate) fn row_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() < a.ncols() {
        a.transpose().qr().r().transpose()
    } else {
        a.clone()
    }
}

/// Copies the listed rows, in order.
pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

//! Sample moments with the `1/n` covariance divisor.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::types::{MatrixKind, ReturnsMatrix, SymmetricMatrix};
use nalgebra::{DMatrix, DVector};

/// Row means of the returns matrix.
pub fn sample_mean<T: Real>(y: &ReturnsMatrix<T>) -> DVector<T> {
    mean_of_columns(y.data())
}

pub(crate) fn mean_of_columns<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let n = T::from_usize_lossy(m.ncols());
    m.column_sum() / n
}

/// `Y - ybar 1'`.
pub fn centered<T: Real>(y: &ReturnsMatrix<T>) -> DMatrix<T> {
    center_columns(y.data())
}

pub(crate) fn center_columns<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let mean = mean_of_columns(m);
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    c
}

/// `S = (1/n) sum_t (y_t - ybar)(y_t - ybar)'`.
///
/// The divisor is `n`, not `n - 1`; the high-dimensional corrections in
/// [`crate::frontier`] depend on it.
pub fn sample_covariance<T: Real>(y: &ReturnsMatrix<T>) -> Result<SymmetricMatrix<T>> {
    if y.n() < 2 {
        return Err(Error::InsufficientObservations(y.n()));
    }
    let c = centered(y);
    let n = T::from_usize_lossy(y.n());
    let s = (&c * c.transpose()) / n;
    Ok(SymmetricMatrix::symmetrized(s, MatrixKind::Covariance))
}

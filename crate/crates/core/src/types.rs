//! Domain types shared across the estimators.

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Asset returns: `p` assets (rows) observed at `n` time points (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMatrix<T: Real> {
    data: DMatrix<T>,
}

impl<T: Real> ReturnsMatrix<T> {
    /// Wraps a `p x n` matrix. Requires `p >= 1`, `n >= 2` and finite entries.
    pub fn new(data: DMatrix<T>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidInput("returns matrix has no assets".into()));
        }
        if data.ncols() < 2 {
            return Err(Error::InsufficientObservations(data.ncols()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("returns contain non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Builds from time-major rows (`n` observations of `p` assets each).
    pub fn from_observations(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch { expected: p, actual: bad.len() });
        }
        Self::new(DMatrix::from_fn(p, n, |i, t| rows[t][i]))
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.data
    }

    /// Number of assets.
    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    /// Concentration ratio `p / n`.
    pub fn concentration(&self) -> T {
        T::from_usize_lossy(self.p()) / T::from_usize_lossy(self.n())
    }

    /// Columns `start..end` as a new matrix (an estimation window).
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if end > self.n() || start >= end {
            return Err(Error::InvalidInput(format!(
                "window {start}..{end} outside 0..{}",
                self.n()
            )));
        }
        Self::new(self.data.columns(start, end - start).into_owned())
    }

    /// Keeps only the listed asset rows.
    pub fn select_assets(&self, assets: &[usize]) -> Result<Self> {
        if let Some(&bad) = assets.iter().find(|&&i| i >= self.p()) {
            return Err(Error::InvalidInput(format!("asset index {bad} out of range")));
        }
        Self::new(self.data.select_rows(assets.iter()))
    }
}

/// What a [`SymmetricMatrix`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Covariance,
    Inverse,
    PseudoInverse,
    GeneralizedInverse,
    QProjection,
}

/// A dense symmetric `p x p` matrix tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix<T: Real> {
    data: DMatrix<T>,
    kind: MatrixKind,
}

impl<T: Real> SymmetricMatrix<T> {
    /// Validates squareness, symmetry (absolute tolerance `1e-10 * max|a_ij|`)
    /// and, for covariances, positive semi-definiteness.
    pub fn new(data: DMatrix<T>, kind: MatrixKind) -> Result<Self> {
        if !data.is_square() {
            return Err(Error::InvalidInput(format!(
                "matrix is {}x{}, expected square",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("matrix contains non-finite values".into()));
        }
        let scale = data.amax();
        let tol = symmetry_tolerance::<T>() * scale;
        let p = data.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                if (data[(i, j)] - data[(j, i)]).abs() > tol {
                    return Err(Error::InvalidInput(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let sym = Self::symmetrized(data, kind);
        if kind == MatrixKind::Covariance && p > 0 {
            let floor = -T::lit(1e-10) * sym.data.trace() / T::from_usize_lossy(p);
            let min_eig = sym.data.clone().symmetric_eigenvalues().min();
            if min_eig < floor {
                return Err(Error::InvalidInput(format!(
                    "covariance has negative eigenvalue {min_eig}"
                )));
            }
        }
        Ok(sym)
    }

    /// Averages `A` and `A'` to remove round-off asymmetry. No validation.
    pub(crate) fn symmetrized(mut data: DMatrix<T>, kind: MatrixKind) -> Self {
        let p = data.nrows();
        let half = T::lit(0.5);
        for i in 0..p {
            for j in (i + 1)..p {
                let v = (data[(i, j)] + data[(j, i)]) * half;
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data, kind }
    }

    pub fn identity(p: usize, kind: MatrixKind) -> Self {
        Self { data: DMatrix::identity(p, p), kind }
    }

    pub fn from_diagonal(diag: &[T], kind: MatrixKind) -> Self {
        Self { data: DMatrix::from_diagonal(&DVector::from_column_slice(diag)), kind }
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.data
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn with_kind(self, kind: MatrixKind) -> Self {
        Self { data: self.data, kind }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `x' A y`.
    pub fn bilinear(&self, x: &DVector<T>, y: &DVector<T>) -> T {
        x.dot(&(&self.data * y))
    }

    /// `x' A x`.
    pub fn quadratic(&self, x: &DVector<T>) -> T {
        self.bilinear(x, x)
    }

    /// `1' A 1`.
    pub fn ones_form(&self) -> T {
        self.data.sum()
    }

    /// `A 1`, i.e. the row sums.
    pub fn times_ones(&self) -> DVector<T> {
        DVector::from_iterator(self.dim(), self.data.row_iter().map(|r| r.sum()))
    }
}

fn symmetry_tolerance<T: Real>() -> T {
    let floor = T::lit(1e-10);
    let machine = T::eps() * T::lit(64.0);
    if machine > floor {
        machine
    } else {
        floor
    }
}

/// How a weight vector was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    TrueEu,
    Gmv,
    Traditional,
    TraditionalPinv,
    OracleShrunk,
    BonaFide,
    Target,
}

/// Portfolio weights satisfying the budget constraint `sum(w) = 1`.
///
/// Short positions are allowed; there are no box constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioWeights<T: Real> {
    w: DVector<T>,
    provenance: Provenance,
    alpha: Option<T>,
}

impl<T: Real> PortfolioWeights<T> {
    /// Validates `|sum(w) - 1| <= 1e-10 * max(1, ||w||_1)`.
    pub fn new(w: DVector<T>, provenance: Provenance) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("weights contain non-finite values".into()));
        }
        let l1 = w.iter().fold(T::zero(), |acc, x| acc + x.abs());
        let scale = if l1 > T::one() { l1 } else { T::one() };
        let err = (w.sum() - T::one()).abs();
        if err > budget_tolerance::<T>() * scale {
            return Err(Error::InvalidInput(format!("weights sum to {} (expected 1)", w.sum())));
        }
        Ok(Self { w, provenance, alpha: None })
    }

    /// Spreads the round-off budget residual `1 - sum(w)` evenly over the
    /// entries before validating. Used for vectors that sum to one
    /// algebraically.
    pub(crate) fn from_budget_vector(mut w: DVector<T>, provenance: Provenance) -> Result<Self> {
        if !w.is_empty() {
            let shift = (T::one() - w.sum()) / T::from_usize_lossy(w.len());
            w.add_scalar_mut(shift);
        }
        Self::new(w, provenance)
    }

    /// Uniform weights `1/p`.
    pub fn equal(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidInput("p must be at least 1".into()));
        }
        Self::new(DVector::from_element(p, T::one() / T::from_usize_lossy(p)), Provenance::Target)
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.w
    }

    pub fn into_inner(self) -> DVector<T> {
        self.w
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn alpha(&self) -> Option<T> {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn budget_tolerance<T: Real>() -> T {
    let floor = T::lit(1e-10);
    let machine = T::eps() * T::lit(1e3);
    if machine > floor {
        machine
    } else {
        floor
    }
}

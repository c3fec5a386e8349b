//! Inverses, pseudo-inverses and the `Q` projection.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::types::{MatrixKind, SymmetricMatrix};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default relative rank tolerance per unit of dimension.
fn default_rank_factor<T: Real>() -> T {
    let floor = T::lit(1e-10);
    let machine = T::eps() * T::lit(10.0);
    if machine > floor {
        machine
    } else {
        floor
    }
}

/// Default rank tolerance `1e-10 * p`, relative to the largest `|lambda|`.
pub fn default_rank_tol<T: Real>(p: usize) -> T {
    default_rank_factor::<T>() * T::from_usize_lossy(p.max(1))
}

fn pinv_from_eigen<T: Real>(eig: SymmetricEigen<T, nalgebra::Dyn>, rank_tol: T) -> DMatrix<T> {
    let max = eig.eigenvalues.amax();
    let p = eig.eigenvalues.len();
    if max == T::zero() {
        return DMatrix::zeros(p, p);
    }
    let cut = rank_tol * max;
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cut { T::one() / l } else { T::zero() });
    let scaled = DMatrix::from_fn(p, p, |i, j| eig.eigenvectors[(i, j)] * inv[j]);
    &scaled * eig.eigenvectors.transpose()
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its eigendecomposition.
///
/// Eigenvalues with `|lambda| <= rank_tol * max|lambda|` are treated as zero.
/// `rank_tol` defaults to [`default_rank_tol`].
pub fn moore_penrose_pinv<T: Real>(
    s: &SymmetricMatrix<T>,
    rank_tol: Option<T>,
) -> SymmetricMatrix<T> {
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(s.dim()));
    let eig = s.data().clone().symmetric_eigen();
    SymmetricMatrix::symmetrized(pinv_from_eigen(eig, tol), MatrixKind::PseudoInverse)
}

/// `(A A')^+` computed through the eigendecomposition of the smaller Gram
/// matrix `A'A`: `(A A')^+ = A (A'A)^{+2} A'`.
///
/// Cheap when `A` is wide in rows (`p x n` with `n << p`).
pub fn gram_pinv<T: Real>(a: &DMatrix<T>, rank_tol: Option<T>) -> SymmetricMatrix<T> {
    let n = a.ncols();
    let tol = rank_tol.unwrap_or_else(|| default_rank_tol(a.nrows().max(n)));
    let eig = (a.transpose() * a).symmetric_eigen();
    let max = eig.eigenvalues.amax();
    if max == T::zero() {
        return SymmetricMatrix::symmetrized(
            DMatrix::zeros(a.nrows(), a.nrows()),
            MatrixKind::PseudoInverse,
        );
    }
    let cut = tol * max;
    // A U diag(1/lambda) gives the eigenvectors of AA' scaled by lambda^{-1/2} twice.
    let au = a * &eig.eigenvectors;
    let scaled = DMatrix::from_fn(a.nrows(), n, |i, j| {
        let l = eig.eigenvalues[j];
        if l.abs() > cut {
            au[(i, j)] / l
        } else {
            T::zero()
        }
    });
    SymmetricMatrix::symmetrized(&scaled * scaled.transpose(), MatrixKind::PseudoInverse)
}

/// Symmetric square root and inverse square root of a positive definite matrix.
pub fn symmetric_sqrt_pair<T: Real>(
    sigma: &SymmetricMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let eig = sigma.data().clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let floor = default_rank_tol::<T>(sigma.dim()) * max;
    if max == T::zero() || eig.eigenvalues.iter().any(|&l| l <= floor) {
        return Err(Error::NotPositiveDefinite);
    }
    let p = sigma.dim();
    let v = &eig.eigenvectors;
    let root = eig.eigenvalues.map(|l| l.sqrt());
    let sqrt = DMatrix::from_fn(p, p, |i, j| v[(i, j)] * root[j]) * v.transpose();
    let inv_sqrt = DMatrix::from_fn(p, p, |i, j| v[(i, j)] / root[j]) * v.transpose();
    Ok((symmetrize(sqrt), symmetrize(inv_sqrt)))
}

/// Symmetric PSD square root. Negative round-off eigenvalues are set to zero.
pub fn symmetric_sqrt<T: Real>(sigma: &SymmetricMatrix<T>) -> DMatrix<T> {
    let eig = sigma.data().clone().symmetric_eigen();
    let p = sigma.dim();
    let v = &eig.eigenvectors;
    let root = eig
        .eigenvalues
        .map(|l| if l > T::zero() { l.sqrt() } else { T::zero() });
    symmetrize(DMatrix::from_fn(p, p, |i, j| v[(i, j)] * root[j]) * v.transpose())
}

fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    SymmetricMatrix::symmetrized(m, MatrixKind::Covariance).into_inner()
}

/// `S* = Sigma^{-1/2} ((1/n) X X' - xbar xbar')^+ Sigma^{-1/2}`.
///
/// A generalized inverse of `S = Sigma^{1/2} ((1/n) X X' - xbar xbar') Sigma^{1/2}`
/// that needs the true `Sigma`. It is symmetric, but `S* S` generally is not.
pub fn generalized_inverse_oracle<T: Real>(
    sigma: &SymmetricMatrix<T>,
    x: &DMatrix<T>,
    xbar: &DVector<T>,
) -> Result<SymmetricMatrix<T>> {
    let p = sigma.dim();
    if x.nrows() != p {
        return Err(Error::DimensionMismatch { expected: p, actual: x.nrows() });
    }
    if xbar.len() != p {
        return Err(Error::DimensionMismatch { expected: p, actual: xbar.len() });
    }
    let (_, inv_sqrt) = symmetric_sqrt_pair(sigma)?;
    let n = T::from_usize_lossy(x.ncols());
    let inner = x * x.transpose() / n - xbar * xbar.transpose();
    let inner = SymmetricMatrix::symmetrized(inner, MatrixKind::Covariance);
    let pinv = moore_penrose_pinv(&inner, None);
    let s_star = &inv_sqrt * pinv.data() * &inv_sqrt;
    Ok(SymmetricMatrix::symmetrized(s_star, MatrixKind::GeneralizedInverse))
}

/// [`generalized_inverse_oracle`] with `xbar` set to the row means of `X`,
/// computed through the `n x n` Gram matrix. `inv_sqrt` is `Sigma^{-1/2}`.
pub fn generalized_inverse_from_innovations<T: Real>(
    inv_sqrt: &DMatrix<T>,
    x: &DMatrix<T>,
) -> SymmetricMatrix<T> {
    let n = T::from_usize_lossy(x.ncols());
    let xc = crate::moments::center_columns(x) / n.sqrt();
    let pinv = gram_pinv(&xc, None);
    let s_star = inv_sqrt * pinv.data() * inv_sqrt;
    SymmetricMatrix::symmetrized(s_star, MatrixKind::GeneralizedInverse)
}

/// Pseudo-inverse of `Vtilde - xbar xbar'` from `Vtilde^+`.
///
/// When `xbar' Vtilde^+ xbar = 1` (the data case: `xbar` is the mean of the
/// columns forming `Vtilde`) the three-term Meyer update is used:
///
/// `V^+ = Vt^+ - (Vt^+ x x' Vt^{+2} + Vt^{+2} x x' Vt^+) / (x' Vt^{+2} x)
///        + (x' Vt^{+3} x) / (x' Vt^{+2} x)^2 Vt^+ x x' Vt^+`.
///
/// Otherwise the Sherman-Morrison form `Vt^+ + Vt^+ x x' Vt^+ / (1 - x' Vt^+ x)`
/// applies, which is exact when `xbar` lies in the column space of `Vtilde`.
pub fn rank_one_pinv_update<T: Real>(
    vplus: &SymmetricMatrix<T>,
    xbar: &DVector<T>,
) -> Result<SymmetricMatrix<T>> {
    let p = vplus.dim();
    if xbar.len() != p {
        return Err(Error::DimensionMismatch { expected: p, actual: xbar.len() });
    }
    let xnorm = xbar.norm();
    if xnorm == T::zero() {
        return Ok(vplus.clone().with_kind(MatrixKind::PseudoInverse));
    }
    let vp = vplus.data();
    let u = vp * xbar;
    let w = vp * &u;
    let a = xbar.dot(&u);
    let b2 = u.dot(&u);
    let scale = xnorm * vp.amax();
    if !(b2 > T::lit(1e-24) * scale * scale) {
        return Err(Error::UpdateSingular(b2.as_f64()));
    }
    let out = if (T::one() - a).abs() <= T::lit(1e-8) {
        let b3 = u.dot(&w);
        let uw = &u * w.transpose();
        vp - (&uw + uw.transpose()) / b2 + &u * u.transpose() * (b3 / (b2 * b2))
    } else {
        vp + &u * u.transpose() / (T::one() - a)
    };
    Ok(SymmetricMatrix::symmetrized(out, MatrixKind::PseudoInverse))
}

/// `(Vtilde - x x')^{-1} = Vtilde^{-1} + Vtilde^{-1} x x' Vtilde^{-1} / (1 - x' Vtilde^{-1} x)`.
pub fn rank_one_inverse_update<T: Real>(
    vinv: &SymmetricMatrix<T>,
    x: &DVector<T>,
) -> Result<SymmetricMatrix<T>> {
    let p = vinv.dim();
    if x.len() != p {
        return Err(Error::DimensionMismatch { expected: p, actual: x.len() });
    }
    let u = vinv.data() * x;
    let denom = T::one() - x.dot(&u);
    if denom.abs() <= T::eps().sqrt() {
        return Err(Error::Singular("rank-one downdate makes the matrix singular"));
    }
    let out = vinv.data() + &u * u.transpose() / denom;
    Ok(SymmetricMatrix::symmetrized(out, MatrixKind::Inverse))
}

/// `1' M 1`, failing when it is numerically zero.
pub(crate) fn gmv_denominator<T: Real>(m: &SymmetricMatrix<T>) -> Result<T> {
    let d = m.ones_form();
    let p = T::from_usize_lossy(m.dim());
    let floor = T::eps() * T::lit(10.0) * p * m.data().amax();
    if !d.is_finite() || d.abs() <= floor {
        return Err(Error::DegenerateDenominator);
    }
    Ok(d)
}

/// `Q = M - M 1 1' M / (1' M 1)`, so that `Q 1 = 0`.
///
/// Works for any inverse-like input: the true precision, `S^{-1}`, `S^+` or `S*`.
pub fn q_matrix<T: Real>(m: &SymmetricMatrix<T>) -> Result<SymmetricMatrix<T>> {
    let d = gmv_denominator(m)?;
    let m1 = m.times_ones();
    let q = m.data() - &m1 * m1.transpose() / d;
    Ok(SymmetricMatrix::symmetrized(q, MatrixKind::QProjection))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// Fails when a pivot falls below `1e-12 * p * max(diag)`, which is how
/// rank deficiency (for example a sample covariance with `p >= n`) shows up.
pub fn spd_inverse<T: Real>(m: &SymmetricMatrix<T>) -> Result<SymmetricMatrix<T>> {
    let p = m.dim();
    let max_diag = m.data().diagonal().max();
    if p == 0 || !(max_diag > T::zero()) {
        return Err(Error::Singular("matrix is singular"));
    }
    let chol = m.data().clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let floor = T::lit(1e-12) * T::from_usize_lossy(p) * max_diag;
    let l = chol.l_dirty();
    if (0..p).any(|i| l[(i, i)] * l[(i, i)] <= floor) {
        return Err(Error::Singular("matrix is singular"));
    }
    Ok(SymmetricMatrix::symmetrized(chol.inverse(), MatrixKind::Inverse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::mean_of_columns;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn sym(m: DMatrix<f64>) -> SymmetricMatrix<f64> {
        SymmetricMatrix::symmetrized(m, MatrixKind::Covariance)
    }

    fn penrose_gap(a: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
        let c1 = (a * g * a - a).amax();
        let c2 = (g * a * g - g).amax();
        let ag = a * g;
        let ga = g * a;
        let c3 = (&ag - ag.transpose()).amax();
        let c4 = (&ga - ga.transpose()).amax();
        c1.max(c2).max(c3).max(c4)
    }

    #[test]
    fn pinv_trivial_cases() {
        let id = SymmetricMatrix::<f64>::identity(3, MatrixKind::Covariance);
        assert!((moore_penrose_pinv(&id, None).data() - DMatrix::identity(3, 3)).amax() < 1e-15);
        let d = SymmetricMatrix::from_diagonal(&[2.0, 0.0], MatrixKind::Covariance);
        let g = moore_penrose_pinv(&d, None);
        assert!((g.data() - DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])).amax() < 1e-15);
        let z = SymmetricMatrix::<f64>::from_diagonal(&[0.0, 0.0], MatrixKind::Covariance);
        assert_eq!(moore_penrose_pinv(&z, None).data().amax(), 0.0);
    }

    #[test]
    fn pinv_rank_one_penrose() {
        let v = gaussian(5, 1, 3);
        let a = &v * v.transpose();
        let g = moore_penrose_pinv(&sym(a.clone()), None);
        assert!(penrose_gap(&a, g.data()) < 1e-9);
    }

    #[test]
    fn gram_pinv_matches_eigen_pinv() {
        let a = gaussian(12, 5, 4);
        let direct = moore_penrose_pinv(&sym(&a * a.transpose()), None);
        let dual = gram_pinv(&a, None);
        assert!((direct.data() - dual.data()).amax() < 1e-10);
    }

    #[test]
    fn generalized_inverse_spherical_equals_pinv() {
        let (p, n) = (6, 3);
        let x = gaussian(p, n, 5);
        let xbar = mean_of_columns(&x);
        let sigma = sym(DMatrix::identity(p, p) * 4.0);
        let s_star = generalized_inverse_oracle(&sigma, &x, &xbar).unwrap();
        let inner = &x * x.transpose() / n as f64 - &xbar * xbar.transpose();
        let s = sym(inner * 4.0);
        let s_plus = moore_penrose_pinv(&s, None);
        assert!((s_star.data() - s_plus.data()).amax() < 1e-8);
    }

    #[test]
    fn generalized_inverse_full_rank_is_inverse() {
        let (p, n) = (4, 30);
        let x = gaussian(p, n, 6);
        let xbar = mean_of_columns(&x);
        let l = gaussian(p, p, 7);
        let sigma = sym(&l * l.transpose() + DMatrix::identity(p, p));
        let (root, _) = symmetric_sqrt_pair(&sigma).unwrap();
        let inner = &x * x.transpose() / n as f64 - &xbar * xbar.transpose();
        let s = &root * inner * &root;
        let s_star = generalized_inverse_oracle(&sigma, &x, &xbar).unwrap();
        let inv = s.clone().try_inverse().unwrap();
        assert!((s_star.data() - inv).amax() < 1e-8);
    }

    #[test]
    fn generalized_inverse_identities_and_asymmetry() {
        let (p, n) = (8, 4);
        let x = gaussian(p, n, 8);
        let xbar = mean_of_columns(&x);
        let l = gaussian(p, p, 9);
        let sigma = sym(&l * l.transpose() + DMatrix::identity(p, p));
        let (root, inv_sqrt) = symmetric_sqrt_pair(&sigma).unwrap();
        let inner = &x * x.transpose() / n as f64 - &xbar * xbar.transpose();
        let s = &root * inner * &root;
        let g = generalized_inverse_oracle(&sigma, &x, &xbar).unwrap();
        let g = g.data();
        assert!((g * &s * g - g).amax() < 1e-8 * g.amax().max(1.0));
        assert!((&s * g * &s - &s).amax() < 1e-8 * s.amax().max(1.0));
        let gs = g * &s;
        assert!((&gs - gs.transpose()).amax() > 1e-6);
        let fast = generalized_inverse_from_innovations(&inv_sqrt, &x);
        assert!((fast.data() - g).amax() < 1e-8 * g.amax());
    }

    #[test]
    fn rank_one_update_zero_vector() {
        let a = gaussian(4, 4, 10);
        let vp = sym(&a * a.transpose());
        let out = rank_one_pinv_update(&vp, &DVector::zeros(4)).unwrap();
        assert_eq!(out.data(), vp.data());
    }

    #[test]
    fn rank_one_update_matches_direct_pinv_on_singular_gram() {
        let (p, n) = (8, 4);
        let x = gaussian(p, n, 11);
        let vt = sym(&x * x.transpose() / n as f64);
        let xbar = mean_of_columns(&x);
        let vt_plus = moore_penrose_pinv(&vt, None);
        let updated = rank_one_pinv_update(&vt_plus, &xbar).unwrap();
        let direct = moore_penrose_pinv(&sym(vt.data() - &xbar * xbar.transpose()), None);
        assert!((updated.data() - direct.data()).amax() < 1e-8);
    }

    #[test]
    fn rank_one_update_full_rank_matches_sherman_morrison() {
        let (p, n) = (2, 5);
        let x = gaussian(p, n, 12);
        let vt = &x * x.transpose() / n as f64;
        let xbar = mean_of_columns(&x);
        let vinv = vt.clone().try_inverse().unwrap();
        let u = &vinv * &xbar;
        let sm = &vinv + &u * u.transpose() / (1.0 - xbar.dot(&u));
        let updated = rank_one_pinv_update(&sym(vinv.clone()), &xbar).unwrap();
        assert!((updated.data() - &sm).amax() < 1e-10);
        let inv_path = rank_one_inverse_update(&sym(vinv), &xbar).unwrap();
        assert!((inv_path.data() - &sm).amax() < 1e-10);
        let direct = (vt - &xbar * xbar.transpose()).try_inverse().unwrap();
        assert!((sm - direct).amax() < 1e-8);
    }

    #[test]
    fn rank_one_update_orthogonal_vector_is_singular() {
        let vp = SymmetricMatrix::from_diagonal(&[1.0, 0.0], MatrixKind::PseudoInverse);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(rank_one_pinv_update(&vp, &x), Err(Error::UpdateSingular(_))));
    }

    #[test]
    fn q_matrix_identity() {
        let q = q_matrix(&SymmetricMatrix::<f64>::identity(2, MatrixKind::Inverse)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((q.data() - expect).amax() < 1e-15);
    }

    #[test]
    fn q_matrix_matches_literal_formula() {
        let a = gaussian(5, 5, 13);
        let m = &a * a.transpose() + DMatrix::identity(5, 5);
        let minv = m.try_inverse().unwrap();
        let q = q_matrix(&sym(minv.clone())).unwrap();
        let ones = DVector::from_element(5, 1.0);
        let mut oracle = DMatrix::zeros(5, 5);
        let denom = ones.dot(&(&minv * &ones));
        for i in 0..5 {
            for j in 0..5 {
                let ri: f64 = (0..5).map(|k| minv[(i, k)]).sum();
                let rj: f64 = (0..5).map(|k| minv[(k, j)]).sum();
                oracle[(i, j)] = minv[(i, j)] - ri * rj / denom;
            }
        }
        assert!((q.data() - oracle).amax() < 1e-12);
        assert!((q.data() * ones).amax() < 1e-12);
    }

    #[test]
    fn q_matrix_degenerate() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(matches!(q_matrix(&sym(m)), Err(Error::DegenerateDenominator)));
    }

    #[test]
    fn spd_inverse_rejects_rank_deficient() {
        let a = gaussian(5, 3, 14);
        let s = sym(&a * a.transpose());
        assert!(spd_inverse(&s).is_err());
        let b = gaussian(3, 10, 15);
        let s = sym(&b * b.transpose());
        let inv = spd_inverse(&s).unwrap();
        assert!((inv.data() * s.data() - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn f32_pinv() {
        let d = SymmetricMatrix::<f32>::from_diagonal(&[4.0, 0.0], MatrixKind::Covariance);
        let g = moore_penrose_pinv(&d, None);
        assert!((g.data()[(0, 0)] - 0.25).abs() < 1e-7);
    }
}

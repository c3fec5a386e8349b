//! Efficient-frontier parameters `(R_GMV, V_GMV, s)` and their estimators.

use crate::error::{Error, Result};
use crate::inverse::{gmv_denominator, spd_inverse};
use crate::scalar::Real;
use crate::types::{PortfolioWeights, Provenance, SymmetricMatrix};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Where a set of frontier parameters came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontierSource {
    True,
    Plugin,
    ConsistentLt1,
    ConsistentGt1,
}

/// GMV expected return, GMV variance and the slope `s = mu' Q mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierParams<T> {
    pub r_gmv: T,
    pub v_gmv: T,
    pub s: T,
    pub source: FrontierSource,
    /// Set for the `p > n` estimators, which replace `S*` by `S^+` and are
    /// exact only when the covariance is a multiple of the identity.
    pub approximate: bool,
}

/// Expected return and variance of a target portfolio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats<T> {
    pub r_b: T,
    pub v_b: T,
}

/// `M 1 / (1' M 1)` for an inverse-like `M`.
pub fn gmv_weights<T: Real>(m: &SymmetricMatrix<T>) -> Result<PortfolioWeights<T>> {
    let d = gmv_denominator(m)?;
    PortfolioWeights::from_budget_vector(m.times_ones() / d, Provenance::Gmv)
}

/// Frontier parameters from an inverse-like matrix and a mean vector.
pub(crate) fn frontier_from_inverse<T: Real>(
    m: &SymmetricMatrix<T>,
    mean: &DVector<T>,
    source: FrontierSource,
) -> Result<FrontierParams<T>> {
    if mean.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), actual: mean.len() });
    }
    let d = gmv_denominator(m)?;
    let m1 = m.times_ones();
    let one_m_mu = m1.dot(mean);
    let s = m.quadratic(mean) - one_m_mu * one_m_mu / d;
    Ok(FrontierParams { r_gmv: one_m_mu / d, v_gmv: T::one() / d, s, source, approximate: false })
}

/// Population frontier from the true `(mu, Sigma)`.
pub fn true_frontier<T: Real>(
    mu: &DVector<T>,
    sigma: &SymmetricMatrix<T>,
) -> Result<FrontierParams<T>> {
    let inv = spd_inverse(sigma)?;
    frontier_from_inverse(&inv, mu, FrontierSource::True)
}

/// Plug-in frontier with `(ybar, S)` in place of `(mu, Sigma)`.
pub fn plugin_frontier<T: Real>(
    s: &SymmetricMatrix<T>,
    ybar: &DVector<T>,
) -> Result<FrontierParams<T>> {
    let inv = spd_inverse(s).map_err(|_| Error::Singular("plug-in frontier requires p < n"))?;
    plugin_frontier_from_inverse(&inv, ybar)
}

/// Plug-in frontier from an already inverted `S`.
pub fn plugin_frontier_from_inverse<T: Real>(
    s_inv: &SymmetricMatrix<T>,
    ybar: &DVector<T>,
) -> Result<FrontierParams<T>> {
    frontier_from_inverse(s_inv, ybar, FrontierSource::Plugin)
}

/// Corrections for `0 < c < 1`:
/// `R_c = R`, `V_c = V / (1 - c)`, `s_c = (1 - c) s - c`.
pub fn consistent_frontier_lt1<T: Real>(
    plugin: &FrontierParams<T>,
    c_hat: T,
) -> Result<FrontierParams<T>> {
    if !(c_hat > T::zero()) {
        return Err(Error::InvalidInput(format!("concentration must be positive, got {c_hat}")));
    }
    if c_hat >= T::one() {
        return Err(Error::RegimeMismatch(format!("c = {c_hat} >= 1: use the c>1 path")));
    }
    let one_minus = T::one() - c_hat;
    let out = FrontierParams {
        r_gmv: plugin.r_gmv,
        v_gmv: plugin.v_gmv / one_minus,
        s: one_minus * plugin.s - c_hat,
        source: FrontierSource::ConsistentLt1,
        approximate: false,
    };
    warn_if_negative(&out);
    Ok(out)
}

/// Pseudo-inverse approximations for `c > 1`:
/// `R = ybar' S^+ 1 / 1' S^+ 1`, `V = 1 / (c (c - 1) 1' S^+ 1)`,
/// `s = c ((c - 1) ybar' Q^+ ybar - 1)`.
pub fn consistent_frontier_gt1<T: Real>(
    s_plus: &SymmetricMatrix<T>,
    ybar: &DVector<T>,
    c_hat: T,
) -> Result<FrontierParams<T>> {
    if c_hat <= T::one() {
        return Err(Error::RegimeMismatch(format!("c = {c_hat} <= 1: use the c<1 path")));
    }
    let d = gmv_denominator(s_plus)?;
    if d <= T::zero() {
        return Err(Error::DegenerateDenominator);
    }
    let raw = frontier_from_inverse(s_plus, ybar, FrontierSource::ConsistentGt1)?;
    let cm1 = c_hat - T::one();
    let out = FrontierParams {
        r_gmv: raw.r_gmv,
        v_gmv: raw.v_gmv / (c_hat * cm1),
        s: c_hat * (cm1 * raw.s - T::one()),
        source: FrontierSource::ConsistentGt1,
        approximate: true,
    };
    warn_if_negative(&out);
    Ok(out)
}

fn warn_if_negative<T: Real>(f: &FrontierParams<T>) {
    if f.v_gmv < T::zero() {
        log::warn!("consistent V_GMV estimate is negative ({})", f.v_gmv);
    }
    if f.s < T::zero() {
        log::warn!("consistent slope estimate is negative ({})", f.s);
    }
}

/// `(b' ybar, b' S b)`.
pub fn target_stats<T: Real>(
    b: &PortfolioWeights<T>,
    s: &SymmetricMatrix<T>,
    ybar: &DVector<T>,
) -> Result<TargetStats<T>> {
    let w = b.weights();
    if w.len() != s.dim() || ybar.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), actual: w.len() });
    }
    Ok(TargetStats { r_b: w.dot(ybar), v_b: s.quadratic(w) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MatrixKind;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_spd(p: usize, seed: u64) -> SymmetricMatrix<f64> {
        let a = gaussian(p, p, seed);
        SymmetricMatrix::new(&a * a.transpose() + DMatrix::identity(p, p), MatrixKind::Covariance)
            .unwrap()
    }

    #[test]
    fn gmv_trivial() {
        let w = gmv_weights(&SymmetricMatrix::<f64>::identity(4, MatrixKind::Inverse)).unwrap();
        assert!(w.weights().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = gmv_weights(&SymmetricMatrix::<f64>::from_diagonal(&[1.0, 3.0], MatrixKind::Inverse))
            .unwrap();
        assert!((w.weights()[0] - 0.25).abs() < 1e-15);
        assert!((w.weights()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn gmv_matches_kkt_system() {
        let p = 6;
        let sigma = random_spd(p, 1);
        let inv = spd_inverse(&sigma).unwrap();
        let w = gmv_weights(&inv).unwrap();
        // [2 Sigma 1; 1' 0] [w; lambda] = [0; 1]
        let mut k = DMatrix::zeros(p + 1, p + 1);
        k.view_mut((0, 0), (p, p)).copy_from(&(sigma.data() * 2.0));
        for i in 0..p {
            k[(i, p)] = 1.0;
            k[(p, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(p + 1);
        rhs[p] = 1.0;
        let sol = k.lu().solve(&rhs).unwrap();
        assert!((w.weights() - sol.rows(0, p)).amax() < 1e-8);
    }

    #[test]
    fn true_frontier_trivial() {
        let sigma = SymmetricMatrix::<f64>::identity(3, MatrixKind::Covariance);
        let f = true_frontier(&DVector::from_element(3, 0.7), &sigma).unwrap();
        assert!((f.r_gmv - 0.7).abs() < 1e-15);
        assert!((f.v_gmv - 1.0 / 3.0).abs() < 1e-15);
        assert!(f.s.abs() < 1e-15);
        let sigma = SymmetricMatrix::<f64>::identity(2, MatrixKind::Covariance);
        let f = true_frontier(&DVector::from_vec(vec![0.2, 0.0]), &sigma).unwrap();
        assert!((f.r_gmv - 0.1).abs() < 1e-15);
        assert!((f.v_gmv - 0.5).abs() < 1e-15);
        assert!((f.s - 0.02).abs() < 1e-15);
    }

    #[test]
    fn slope_matches_projection_oracle() {
        // s = min over k of (mu - k 1)' Sigma^{-1} (mu - k 1): the residual of
        // projecting mu onto span(1) in the Sigma^{-1} inner product.
        let p = 6;
        let sigma = random_spd(p, 2);
        let mu = gaussian(p, 1, 3).column(0).into_owned();
        let inv = sigma.data().clone().try_inverse().unwrap();
        let ones = DVector::from_element(p, 1.0);
        let k = ones.dot(&(&inv * &mu)) / ones.dot(&(&inv * &ones));
        let r = &mu - &ones * k;
        let oracle = r.dot(&(&inv * &r));
        let f = true_frontier(&mu, &sigma).unwrap();
        assert!((f.s - oracle).abs() < 1e-10);
        let shifted = true_frontier(&mu.add_scalar(5.0), &sigma).unwrap();
        assert!((shifted.s - f.s).abs() < 1e-10);
    }

    #[test]
    fn plugin_rejects_singular() {
        let a = gaussian(5, 4, 4);
        let s = SymmetricMatrix::symmetrized(&a * a.transpose(), MatrixKind::Covariance);
        assert!(plugin_frontier(&s, &DVector::zeros(5)).is_err());
        let id = SymmetricMatrix::<f64>::identity(4, MatrixKind::Covariance);
        let f = plugin_frontier(&id, &DVector::zeros(4)).unwrap();
        assert_eq!((f.r_gmv, f.v_gmv, f.s), (0.0, 0.25, 0.0));
    }

    #[test]
    fn consistent_lt1_corrections() {
        let plug: FrontierParams<f64> = FrontierParams {
            r_gmv: 0.1,
            v_gmv: 1.0,
            s: 3.0,
            source: FrontierSource::Plugin,
            approximate: false,
        };
        let f = consistent_frontier_lt1(&plug, 0.5).unwrap();
        assert_eq!(f.v_gmv, 2.0);
        assert_eq!(f.r_gmv, 0.1);
        let f = consistent_frontier_lt1(&plug, 1e-12).unwrap();
        assert!((f.s - 3.0).abs() < 1e-10);
        assert!((f.v_gmv - 1.0).abs() < 1e-10);
        assert!(matches!(consistent_frontier_lt1(&plug, 1.2), Err(Error::RegimeMismatch(_))));
    }

    #[test]
    fn consistent_gt1_arithmetic() {
        // 1' S^+ 1 = 1 with S^+ = diag(1, 0).
        let sp = SymmetricMatrix::from_diagonal(&[1.0, 0.0], MatrixKind::PseudoInverse);
        let f = consistent_frontier_gt1(&sp, &DVector::zeros(2), 2.0).unwrap();
        assert_eq!(f.v_gmv, 0.5);
        assert!(f.approximate);
        assert!(consistent_frontier_gt1(&sp, &DVector::zeros(2), 0.5).is_err());
    }

    #[test]
    fn target_stats_values() {
        let b = PortfolioWeights::new(DVector::from_vec(vec![1.0, 0.0, 0.0]), Provenance::Target)
            .unwrap();
        let s = SymmetricMatrix::<f64>::identity(3, MatrixKind::Covariance);
        let t = target_stats(&b, &s, &DVector::from_vec(vec![0.3, 0.1, 0.2])).unwrap();
        assert_eq!(t.r_b, 0.3);
        let eq = PortfolioWeights::<f64>::equal(3).unwrap();
        let t = target_stats(&eq, &s, &DVector::zeros(3)).unwrap();
        assert!((t.v_b - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn target_stats_matches_loop() {
        let p = 5;
        let sigma = random_spd(p, 5);
        let raw = gaussian(p, 1, 6).column(0).into_owned();
        let b = PortfolioWeights::from_budget_vector(raw.add_scalar(-raw.mean() + 0.2), Provenance::Target)
            .unwrap();
        let ybar = gaussian(p, 1, 7).column(0).into_owned();
        let t = target_stats(&b, &sigma, &ybar).unwrap();
        let w = b.weights();
        let mut v = 0.0;
        let mut r = 0.0;
        for i in 0..p {
            r += w[i] * ybar[i];
            for j in 0..p {
                v += w[i] * sigma.data()[(i, j)] * w[j];
            }
        }
        assert!((t.r_b - r).abs() < 1e-12);
        assert!((t.v_b - v).abs() < 1e-12);
    }
}

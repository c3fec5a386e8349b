//! Shrinkage of the sample expected-utility portfolio towards a target.
//!
//! `w_GSE = alpha * w_hat + (1 - alpha) * b`, with `alpha` chosen to maximize
//! `w' mu - beta / 2 * w' Sigma w`. Three intensities are available: the
//! finite-sample optimum (needs the true parameters), its deterministic
//! high-dimensional limit, and the bona-fide estimate of that limit.

use crate::error::{Error, Result};
use crate::frontier::{
    consistent_frontier_gt1, consistent_frontier_lt1, frontier_from_inverse, gmv_weights,
    plugin_frontier_from_inverse, target_stats, FrontierParams, FrontierSource, TargetStats,
};
use crate::inverse::{gmv_denominator, gram_pinv, spd_inverse};
use crate::moments::{centered, sample_covariance, sample_mean};
use crate::scalar::Real;
use crate::types::{MatrixKind, PortfolioWeights, Provenance, ReturnsMatrix, SymmetricMatrix};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Concentrations with `|c - 1| <= GUARD_BAND` are rejected: the sample
/// covariance is numerically singular there and neither regime applies.
pub const GUARD_BAND: f64 = 0.05;

/// Out-of-sample criterion used to calibrate the intensity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// `beta = gamma`.
    #[default]
    MeanVariance,
    /// `beta -> infinity`.
    MinVariance,
    /// `beta = R_GMV / V_GMV`.
    SharpeRatio,
}

impl std::str::FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "meanvariance" | "mv" => Ok(Self::MeanVariance),
            "minvariance" | "gmv" => Ok(Self::MinVariance),
            "sharperatio" | "sharpe" | "sr" => Ok(Self::SharpeRatio),
            other => Err(Error::InvalidInput(format!("unknown calibration mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMode<T> {
    pub kind: Calibration,
    /// Risk aversion of the underlying expected-utility portfolio.
    pub gamma: T,
    /// Replaces the resolved `beta` when set.
    #[serde(default)]
    pub beta_override: Option<T>,
}

impl<T: Real> CalibrationMode<T> {
    pub fn new(kind: Calibration, gamma: T) -> Result<Self> {
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { kind, gamma, beta_override: None })
    }

    pub fn with_beta(mut self, beta: T) -> Result<Self> {
        if !(beta > T::zero()) || !beta.is_finite() {
            return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
        }
        self.beta_override = Some(beta);
        Ok(self)
    }
}

/// Calibration parameter `beta`, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beta<T> {
    Finite(T),
    Infinite,
}

/// Concentration regime of an estimation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "c<1")]
    BelowOne,
    #[serde(rename = "c>1")]
    AboveOne,
}

/// Classifies `c`, rejecting non-positive values and the guard band around 1.
pub fn regime_of<T: Real>(c: T) -> Result<Regime> {
    let cf = c.as_f64();
    if !(cf > 0.0) || !cf.is_finite() {
        return Err(Error::InvalidInput(format!("concentration must be positive, got {cf}")));
    }
    if (cf - 1.0).abs() <= GUARD_BAND + 1e-12 {
        return Err(Error::GuardBand(cf));
    }
    Ok(if cf < 1.0 { Regime::BelowOne } else { Regime::AboveOne })
}

/// Resolves `beta` for a calibration mode. `beta_override` wins when set.
pub fn resolve_beta<T: Real>(
    mode: &CalibrationMode<T>,
    frontier: &FrontierParams<T>,
) -> Result<Beta<T>> {
    if let Some(b) = mode.beta_override {
        return Ok(Beta::Finite(b));
    }
    match mode.kind {
        Calibration::MeanVariance => Ok(Beta::Finite(mode.gamma)),
        Calibration::MinVariance => Ok(Beta::Infinite),
        Calibration::SharpeRatio => {
            let ratio = frontier.r_gmv / frontier.v_gmv;
            if ratio > T::zero() && ratio.is_finite() && frontier.r_gmv > T::zero() {
                Ok(Beta::Finite(ratio))
            } else {
                Err(Error::SharpeCalibrationUndefined)
            }
        }
    }
}

/// `M 1 / 1' M 1 + gamma^{-1} Q mean` for an inverse-like `M`.
fn eu_from_inverse<T: Real>(
    m: &SymmetricMatrix<T>,
    mean: &DVector<T>,
    gamma: T,
    provenance: Provenance,
) -> Result<PortfolioWeights<T>> {
    if !(gamma > T::zero()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    if mean.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), actual: mean.len() });
    }
    let d = gmv_denominator(m)?;
    let m1 = m.times_ones();
    let m_mean = m.data() * mean;
    // Q mean = M mean - M 1 (1' M mean) / (1' M 1)
    let q_mean = &m_mean - &m1 * (m1.dot(mean) / d);
    let w = m1 / d + q_mean / gamma;
    PortfolioWeights::from_budget_vector(w, provenance)
}

/// Population expected-utility weights `w_GMV + gamma^{-1} Q mu`.
pub fn eu_weights_true<T: Real>(
    mu: &DVector<T>,
    sigma: &SymmetricMatrix<T>,
    gamma: T,
) -> Result<PortfolioWeights<T>> {
    let inv = spd_inverse(sigma)?;
    eu_from_inverse(&inv, mu, gamma, Provenance::TrueEu)
}

/// Sample expected-utility weights from `S^{-1}`, `S^+` or `S*`.
///
/// The provenance is `Traditional` for an inverse or generalized inverse and
/// `TraditionalPinv` for a Moore-Penrose inverse.
pub fn sample_eu_weights<T: Real>(
    s_inv_like: &SymmetricMatrix<T>,
    ybar: &DVector<T>,
    gamma: T,
) -> Result<PortfolioWeights<T>> {
    let provenance = match s_inv_like.kind() {
        MatrixKind::Inverse | MatrixKind::GeneralizedInverse => Provenance::Traditional,
        MatrixKind::PseudoInverse => Provenance::TraditionalPinv,
        other => {
            return Err(Error::InvalidInput(format!(
                "expected an inverse-like matrix, got {other:?}"
            )))
        }
    };
    eu_from_inverse(s_inv_like, ybar, gamma, provenance)
}

/// Optimal intensity for given weights under the true `(mu, Sigma)`:
/// `beta^{-1} (w - b)'(mu - beta Sigma b) / (w - b)' Sigma (w - b)`,
/// or `-(w - b)' Sigma b / (w - b)' Sigma (w - b)` for infinite `beta`.
pub fn finite_sample_alpha<T: Real>(
    w_hat: &PortfolioWeights<T>,
    b: &PortfolioWeights<T>,
    mu: &DVector<T>,
    sigma: &SymmetricMatrix<T>,
    beta: Beta<T>,
) -> Result<T> {
    let p = sigma.dim();
    for len in [w_hat.len(), b.len(), mu.len()] {
        if len != p {
            return Err(Error::DimensionMismatch { expected: p, actual: len });
        }
    }
    let d = w_hat.weights() - b.weights();
    let scale = w_hat.weights().amax().max(b.weights().amax());
    if d.amax() <= T::eps() * T::lit(16.0) * scale {
        return Err(Error::TargetCoincides);
    }
    let sb = sigma.data() * b.weights();
    let den = sigma.quadratic(&d);
    if !(den > T::zero()) {
        return Err(Error::TargetCoincides);
    }
    match beta {
        Beta::Finite(beta) => {
            if !(beta > T::zero()) {
                return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
            }
            Ok((d.dot(mu) - beta * d.dot(&sb)) / (beta * den))
        }
        Beta::Infinite => Ok(-d.dot(&sb) / den),
    }
}

/// Coefficients that differ between the two regimes.
struct RegimeFactors<T> {
    /// `1/(1-c)` or `1/(c(c-1))`.
    k1: T,
    /// `1/(1-c)` or `c^2/(c-1)`.
    kv: T,
    /// `1/(1-c)^3` or `1/(c-1)^3`.
    k3: T,
}

fn regime_factors<T: Real>(c: T) -> Result<RegimeFactors<T>> {
    let one = T::one();
    Ok(match regime_of(c)? {
        Regime::BelowOne => {
            let m = one - c;
            RegimeFactors { k1: one / m, kv: one / m, k3: one / (m * m * m) }
        }
        Regime::AboveOne => {
            let m = c - one;
            RegimeFactors { k1: one / (c * m), kv: c * c / m, k3: one / (m * m * m) }
        }
    })
}

fn intensity<T: Real>(
    f: &FrontierParams<T>,
    t: &TargetStats<T>,
    c: T,
    gamma: T,
    beta: Beta<T>,
) -> Result<T> {
    if !(gamma > T::zero()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let k = regime_factors(c)?;
    let gi = T::one() / gamma;
    let two = T::lit(2.0);
    let den = k.kv * f.v_gmv - two * (f.v_gmv + gi * k.k1 * (t.r_b - f.r_gmv))
        + gi * gi * k.k3 * (f.s + c)
        + t.v_b;
    if !(den > T::zero()) {
        return Err(Error::NonPositiveDenominator(den.as_f64()));
    }
    let dr = f.r_gmv - t.r_b;
    let dv = t.v_b - f.v_gmv;
    match beta {
        Beta::Finite(beta) => {
            if !(beta > T::zero()) {
                return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
            }
            let num = dr * (T::one() + beta * gi * k.k1) + beta * dv + gi * k.k1 * f.s;
            Ok(num / (beta * den))
        }
        Beta::Infinite => Ok((dr * gi * k.k1 + dv) / den),
    }
}

/// Deterministic limit of the optimal intensity for `c < 1` or `c > 1`.
pub fn oracle_alpha_limit<T: Real>(
    frontier: &FrontierParams<T>,
    tstats: &TargetStats<T>,
    c: T,
    gamma: T,
    beta: Beta<T>,
) -> Result<T> {
    intensity(frontier, tstats, c, gamma, beta)
}

/// Bona-fide intensity: the limit formula evaluated at consistent estimates
/// with `c = p/n`. A negative slope estimate is clamped to zero.
pub fn bona_fide_alpha<T: Real>(
    frontier_est: &FrontierParams<T>,
    tstats_est: &TargetStats<T>,
    c_hat: T,
    mode: &CalibrationMode<T>,
) -> Result<T> {
    let (alpha, _) = bona_fide_alpha_with_beta(frontier_est, tstats_est, c_hat, mode)?;
    Ok(alpha)
}

fn bona_fide_alpha_with_beta<T: Real>(
    frontier_est: &FrontierParams<T>,
    tstats_est: &TargetStats<T>,
    c_hat: T,
    mode: &CalibrationMode<T>,
) -> Result<(T, Beta<T>)> {
    let regime = regime_of(c_hat)?;
    match (regime, frontier_est.source) {
        (Regime::BelowOne, FrontierSource::ConsistentLt1)
        | (Regime::AboveOne, FrontierSource::ConsistentGt1) => {}
        (r, s) => {
            return Err(Error::RegimeMismatch(format!(
                "frontier estimate {s:?} does not match regime {r:?}"
            )))
        }
    }
    let beta = resolve_beta(mode, frontier_est)?;
    let mut f = *frontier_est;
    if f.s < T::zero() {
        log::warn!("clamping negative slope estimate {} to 0", f.s);
        f.s = T::zero();
    }
    Ok((intensity(&f, tstats_est, c_hat, mode.gamma, beta)?, beta))
}

/// `alpha * w_hat + (1 - alpha) * b`. `alpha` is not clipped.
pub fn gse_weights<T: Real>(
    alpha: T,
    w_hat: &PortfolioWeights<T>,
    b: &PortfolioWeights<T>,
    provenance: Provenance,
) -> Result<PortfolioWeights<T>> {
    if w_hat.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: w_hat.len(), actual: b.len() });
    }
    let w = w_hat.weights() * alpha + b.weights() * (T::one() - alpha);
    Ok(PortfolioWeights::from_budget_vector(w, provenance)?.with_alpha(alpha))
}

/// Sample quantities shared by every estimator on one estimation window.
#[derive(Debug, Clone)]
pub struct SampleEstimates<T: Real> {
    pub p: usize,
    pub n: usize,
    pub c_hat: T,
    pub regime: Regime,
    pub ybar: DVector<T>,
    pub s: SymmetricMatrix<T>,
    /// `S^{-1}` when `p < n`, `S^+` otherwise.
    pub s_inv: SymmetricMatrix<T>,
}

/// Mean, covariance and its (pseudo-)inverse. Fails inside the guard band.
pub fn sample_estimates<T: Real>(y: &ReturnsMatrix<T>) -> Result<SampleEstimates<T>> {
    let c_hat = y.concentration();
    let regime = regime_of(c_hat)?;
    let ybar = sample_mean(y);
    let s = sample_covariance(y)?;
    let s_inv = match regime {
        Regime::BelowOne => spd_inverse(&s)?,
        Regime::AboveOne => {
            let scaled = centered(y) / T::from_usize_lossy(y.n()).sqrt();
            gram_pinv(&scaled, None)
        }
    };
    Ok(SampleEstimates { p: y.p(), n: y.n(), c_hat, regime, ybar, s, s_inv })
}

impl<T: Real> SampleEstimates<T> {
    /// Plug-in frontier of `(ybar, S^{-1})` or `(ybar, S^+)`, uncorrected.
    pub fn raw_frontier(&self) -> Result<FrontierParams<T>> {
        match self.regime {
            Regime::BelowOne => plugin_frontier_from_inverse(&self.s_inv, &self.ybar),
            Regime::AboveOne => frontier_from_inverse(&self.s_inv, &self.ybar, FrontierSource::Plugin),
        }
    }

    /// Consistent frontier estimates for the regime.
    pub fn consistent_frontier(&self) -> Result<FrontierParams<T>> {
        match self.regime {
            Regime::BelowOne => consistent_frontier_lt1(&self.raw_frontier()?, self.c_hat),
            Regime::AboveOne => consistent_frontier_gt1(&self.s_inv, &self.ybar, self.c_hat),
        }
    }

    pub fn traditional_weights(&self, gamma: T) -> Result<PortfolioWeights<T>> {
        sample_eu_weights(&self.s_inv, &self.ybar, gamma)
    }

    pub fn gmv_weights(&self) -> Result<PortfolioWeights<T>> {
        gmv_weights(&self.s_inv)
    }
}

/// Everything produced by one bona-fide shrinkage fit.
#[derive(Debug, Clone)]
pub struct ShrinkageFit<T: Real> {
    pub c_hat: T,
    pub regime: Regime,
    pub beta: Beta<T>,
    pub alpha: T,
    pub frontier: FrontierParams<T>,
    pub target_stats: TargetStats<T>,
    pub traditional: PortfolioWeights<T>,
    pub bona_fide: PortfolioWeights<T>,
}

/// Bona-fide shrinkage of the sample EU portfolio towards `b`.
pub fn bona_fide_fit<T: Real>(
    est: &SampleEstimates<T>,
    b: &PortfolioWeights<T>,
    mode: &CalibrationMode<T>,
) -> Result<ShrinkageFit<T>> {
    let traditional = est.traditional_weights(mode.gamma)?;
    let frontier = est.consistent_frontier()?;
    let tstats = target_stats(b, &est.s, &est.ybar)?;
    let (alpha, beta) = bona_fide_alpha_with_beta(&frontier, &tstats, est.c_hat, mode)?;
    let bona_fide = gse_weights(alpha, &traditional, b, Provenance::BonaFide)?;
    Ok(ShrinkageFit {
        c_hat: est.c_hat,
        regime: est.regime,
        beta,
        alpha,
        frontier,
        target_stats: tstats,
        traditional,
        bona_fide,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontier::true_frontier;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn random_spd(p: usize, seed: u64) -> SymmetricMatrix<f64> {
        let a = gaussian(p, p, seed);
        SymmetricMatrix::new(&a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5, MatrixKind::Covariance)
            .unwrap()
    }

    fn vec_of(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn utility(w: &DVector<f64>, mu: &DVector<f64>, sigma: &SymmetricMatrix<f64>, beta: f64) -> f64 {
        w.dot(mu) - beta / 2.0 * sigma.quadratic(w)
    }

    fn mix(a: f64, w: &PortfolioWeights<f64>, b: &PortfolioWeights<f64>) -> DVector<f64> {
        w.weights() * a + b.weights() * (1.0 - a)
    }

    #[test]
    fn resolve_beta_examples() {
        let f: FrontierParams<f64> = FrontierParams {
            r_gmv: 0.05,
            v_gmv: 0.04,
            s: 0.25,
            source: FrontierSource::True,
            approximate: false,
        };
        let mv = CalibrationMode::new(Calibration::MeanVariance, 2.5).unwrap();
        assert_eq!(resolve_beta(&mv, &f).unwrap(), Beta::Finite(2.5));
        let sr = CalibrationMode::new(Calibration::SharpeRatio, 1.0).unwrap();
        match resolve_beta(&sr, &f).unwrap() {
            Beta::Finite(b) => assert!((b - 1.25).abs() < 1e-12),
            Beta::Infinite => panic!(),
        }
        let gmv = CalibrationMode::new(Calibration::MinVariance, 1.0).unwrap();
        assert_eq!(resolve_beta(&gmv, &f).unwrap(), Beta::Infinite);
        let neg = FrontierParams { r_gmv: -0.01, ..f };
        assert!(matches!(resolve_beta(&sr, &neg), Err(Error::SharpeCalibrationUndefined)));
        assert!(CalibrationMode::new(Calibration::MeanVariance, 0.0).is_err());
    }

    #[test]
    fn guard_band() {
        assert!(matches!(regime_of(1.0), Err(Error::GuardBand(_))));
        assert!(matches!(regime_of(0.95), Err(Error::GuardBand(_))));
        assert!(matches!(regime_of(1.05), Err(Error::GuardBand(_))));
        assert_eq!(regime_of(0.94).unwrap(), Regime::BelowOne);
        assert_eq!(regime_of(1.06).unwrap(), Regime::AboveOne);
        assert!(regime_of(0.0).is_err());
    }

    #[test]
    fn eu_weights_examples() {
        let id = SymmetricMatrix::<f64>::identity(2, MatrixKind::Covariance);
        let w = eu_weights_true(&vec_of(&[0.2, 0.0]), &id, 1.0).unwrap();
        assert!((w.weights() - vec_of(&[0.6, 0.4])).amax() < 1e-15);
        let sigma = random_spd(5, 1);
        let inv = spd_inverse(&sigma).unwrap();
        let w = eu_weights_true(&DVector::from_element(5, 0.3), &sigma, 1.0).unwrap();
        let g = gmv_weights(&inv).unwrap();
        assert!((w.weights() - g.weights()).amax() < 1e-14);
    }

    #[test]
    fn eu_weights_match_kkt() {
        let p = 8;
        let gamma = 1.7;
        let sigma = random_spd(p, 2);
        let mu = gaussian(p, 1, 3).column(0).into_owned() * 0.1;
        let w = eu_weights_true(&mu, &sigma, gamma).unwrap();
        // maximize w'mu - gamma/2 w'Sigma w s.t. 1'w = 1
        let mut k = DMatrix::zeros(p + 1, p + 1);
        k.view_mut((0, 0), (p, p)).copy_from(&(sigma.data() * gamma));
        for i in 0..p {
            k[(i, p)] = 1.0;
            k[(p, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(p + 1);
        rhs.rows_mut(0, p).copy_from(&mu);
        rhs[p] = 1.0;
        let sol = k.lu().solve(&rhs).unwrap();
        assert!((w.weights() - sol.rows(0, p)).amax() < 1e-8);
    }

    fn toy_estimates(p: usize, n: usize, seed: u64) -> SampleEstimates<f64> {
        let y = ReturnsMatrix::new(gaussian(p, n, seed).add_scalar(0.05)).unwrap();
        sample_estimates(&y).unwrap()
    }

    #[test]
    fn sample_eu_weights_limits() {
        let est = toy_estimates(4, 40, 4);
        let gmv = est.gmv_weights().unwrap();
        let zero = sample_eu_weights(&est.s_inv, &DVector::zeros(4), 1.0).unwrap();
        assert!((zero.weights() - gmv.weights()).amax() < 1e-14);
        let huge = est.traditional_weights(1e8).unwrap();
        assert!((huge.weights() - gmv.weights()).amax() < 1e-6);
        assert_eq!(huge.provenance(), Provenance::Traditional);
    }

    #[test]
    fn sample_eu_weights_formula_reevaluation() {
        let est = toy_estimates(4, 40, 5);
        let gamma = 2.0;
        let w = est.traditional_weights(gamma).unwrap();
        let sinv = est.s.data().clone().try_inverse().unwrap();
        let ones = DVector::from_element(4, 1.0);
        let d = ones.dot(&(&sinv * &ones));
        let q = &sinv - &sinv * &ones * ones.transpose() * &sinv / d;
        let oracle = &sinv * &ones / d + q * &est.ybar / gamma;
        assert!((w.weights() - oracle).amax() < 1e-12);
    }

    #[test]
    fn pinv_provenance_for_wide_panel() {
        let est = toy_estimates(12, 6, 6);
        assert_eq!(est.regime, Regime::AboveOne);
        let w = est.traditional_weights(1.0).unwrap();
        assert_eq!(w.provenance(), Provenance::TraditionalPinv);
    }

    #[test]
    fn finite_alpha_grid_search() {
        let id = SymmetricMatrix::<f64>::identity(2, MatrixKind::Covariance);
        let mu = vec_of(&[0.2, 0.0]);
        let w = eu_weights_true(&mu, &id, 1.0).unwrap();
        let b = PortfolioWeights::new(w.weights() + vec_of(&[0.1, -0.1]), Provenance::Target).unwrap();
        let a = finite_sample_alpha(&w, &b, &mu, &id, Beta::Finite(1.0)).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut g = -3.0;
        while g <= 3.0 {
            let u = utility(&mix(g, &w, &b), &mu, &id, 1.0);
            if u > best.0 {
                best = (u, g);
            }
            g += 1e-6;
        }
        assert!((a - best.1).abs() < 1e-5);
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_alpha_coincident_target() {
        let id = SymmetricMatrix::<f64>::identity(3, MatrixKind::Covariance);
        let b = PortfolioWeights::<f64>::equal(3).unwrap();
        let r = finite_sample_alpha(&b, &b, &DVector::zeros(3), &id, Beta::Finite(1.0));
        assert!(matches!(r, Err(Error::TargetCoincides)));
    }

    #[test]
    fn sharpe_calibration_beats_endpoints() {
        let p = 10;
        let sigma = random_spd(p, 7);
        let mu = vec_of(&(0..p).map(|i| 0.05 + 0.02 * i as f64).collect::<Vec<_>>());
        let f = true_frontier(&mu, &sigma).unwrap();
        let beta = f.r_gmv / f.v_gmv;
        assert!(beta > 0.0);
        let est = toy_estimates(p, 30, 8);
        let w_hat = est.traditional_weights(1.0).unwrap();
        let b = PortfolioWeights::<f64>::equal(p).unwrap();
        let a = finite_sample_alpha(&w_hat, &b, &mu, &sigma, Beta::Finite(beta)).unwrap();
        let sr = |w: &DVector<f64>| w.dot(&mu) / sigma.quadratic(w).sqrt();
        let gse = mix(a, &w_hat, &b);
        assert!(sr(&gse) >= sr(w_hat.weights()) - 1e-12);
        assert!(sr(&gse) >= sr(b.weights()) - 1e-12);
    }

    fn fixed_frontier() -> (FrontierParams<f64>, TargetStats<f64>) {
        (
            FrontierParams {
                r_gmv: 0.05,
                v_gmv: 0.04,
                s: 0.25,
                source: FrontierSource::True,
                approximate: false,
            },
            TargetStats { r_b: 0.03, v_b: 0.09 },
        )
    }

    #[test]
    fn oracle_limit_classical_gmv_target() {
        let (f, _) = fixed_frontier();
        let t = TargetStats { r_b: f.r_gmv, v_b: f.v_gmv };
        let a = oracle_alpha_limit(&f, &t, 1e-9, 1.0, Beta::Finite(1.0)).unwrap();
        assert!((a - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_limit_decreases_towards_one() {
        let (f, t) = fixed_frontier();
        let a: Vec<f64> = [0.5, 0.8, 0.9, 0.94]
            .iter()
            .map(|&c| oracle_alpha_limit(&f, &t, c, 1.0, Beta::Finite(1.0)).unwrap())
            .collect();
        assert!(a.windows(2).all(|w| w[1] < w[0]), "{a:?}");
        assert!(a[3] < 0.1 * a[0]);
        assert!(matches!(
            oracle_alpha_limit(&f, &t, 0.95, 1.0, Beta::Finite(1.0)),
            Err(Error::GuardBand(_))
        ));
    }

    #[test]
    fn oracle_limit_gt1_formula() {
        let (f, t) = fixed_frontier();
        let c: f64 = 2.0;
        let k1 = 1.0 / (c * (c - 1.0));
        let num = (f.r_gmv - t.r_b) * (1.0 + k1) + (t.v_b - f.v_gmv) + k1 * f.s;
        let den = c * c / (c - 1.0) * f.v_gmv - 2.0 * (f.v_gmv + k1 * (t.r_b - f.r_gmv))
            + (f.s + c) / (c - 1.0).powi(3)
            + t.v_b;
        let a = oracle_alpha_limit(&f, &t, c, 1.0, Beta::Finite(1.0)).unwrap();
        assert!((a - num / den).abs() < 1e-14);
    }

    #[test]
    fn bona_fide_equals_oracle_on_truth() {
        let (f, t) = fixed_frontier();
        let mode = CalibrationMode::new(Calibration::MeanVariance, 1.0).unwrap();
        let lt = FrontierParams { source: FrontierSource::ConsistentLt1, ..f };
        let a = bona_fide_alpha(&lt, &t, 0.5, &mode).unwrap();
        assert_eq!(a, oracle_alpha_limit(&f, &t, 0.5, 1.0, Beta::Finite(1.0)).unwrap());
        let gt = FrontierParams { source: FrontierSource::ConsistentGt1, ..f };
        let a = bona_fide_alpha(&gt, &t, 2.0, &mode).unwrap();
        assert_eq!(a, oracle_alpha_limit(&f, &t, 2.0, 1.0, Beta::Finite(1.0)).unwrap());
        assert!(matches!(bona_fide_alpha(&lt, &t, 2.0, &mode), Err(Error::RegimeMismatch(_))));
        let sr = CalibrationMode::new(Calibration::SharpeRatio, 1.0).unwrap();
        let bad = FrontierParams { r_gmv: -0.1, ..lt };
        assert!(matches!(
            bona_fide_alpha(&bad, &t, 0.5, &sr),
            Err(Error::SharpeCalibrationUndefined)
        ));
    }

    #[test]
    fn gse_endpoints() {
        let w = PortfolioWeights::new(vec_of(&[0.5, 0.7, -0.2]), Provenance::Traditional).unwrap();
        let b = PortfolioWeights::<f64>::equal(3).unwrap();
        let g0 = gse_weights(0.0, &w, &b, Provenance::OracleShrunk).unwrap();
        assert_eq!(g0.weights(), b.weights());
        let g1 = gse_weights(1.0, &w, &b, Provenance::OracleShrunk).unwrap();
        assert_eq!(g1.weights(), w.weights());
        let g = gse_weights(0.3, &w, &b, Provenance::BonaFide).unwrap();
        let expect = w.weights() * 0.3 + b.weights() * 0.7;
        assert!((g.weights() - expect).amax() < 1e-15);
        assert_eq!(g.alpha(), Some(0.3));
    }

    #[test]
    fn bona_fide_fit_runs_in_both_regimes() {
        let mode = CalibrationMode::new(Calibration::MeanVariance, 1.0).unwrap();
        for (p, n) in [(10, 40), (30, 10)] {
            let est = toy_estimates(p, n, 9);
            let b = PortfolioWeights::<f64>::equal(p).unwrap();
            let fit = bona_fide_fit(&est, &b, &mode).unwrap();
            assert!((fit.bona_fide.weights().sum() - 1.0).abs() < 1e-10);
            assert!(fit.alpha.is_finite());
        }
    }

    #[test]
    fn f32_pipeline() {
        let y32 = ReturnsMatrix::<f32>::new(gaussian(5, 40, 10).map(|x| x as f32)).unwrap();
        let est = sample_estimates(&y32).unwrap();
        let b = PortfolioWeights::<f32>::equal(5).unwrap();
        let mode = CalibrationMode::new(Calibration::MeanVariance, 1.0f32).unwrap();
        let fit = bona_fide_fit(&est, &b, &mode).unwrap();
        assert!((fit.bona_fide.weights().sum() - 1.0).abs() < 1e-4);
    }

    fn frontier_strategy() -> impl Strategy<Value = (FrontierParams<f64>, TargetStats<f64>, f64, f64)> {
        (
            -0.2..0.2f64,
            0.01..0.5f64,
            0.0..2.0f64,
            -0.2..0.2f64,
            1.0..5.0f64,
            prop_oneof![0.05..0.9f64, 1.1..4.0f64],
            0.5..5.0f64,
        )
            .prop_map(|(r, v, s, rb, vmult, c, gamma)| {
                (
                    FrontierParams {
                        r_gmv: r,
                        v_gmv: v,
                        s,
                        source: FrontierSource::True,
                        approximate: false,
                    },
                    TargetStats { r_b: rb, v_b: v * vmult },
                    c,
                    gamma,
                )
            })
    }

    proptest! {
        #[test]
        fn finite_alpha_is_maximizer(seed in 0u64..10_000, beta in 0.1..10.0f64) {
            let p = 6;
            let sigma = random_spd(p, seed);
            let mu = gaussian(p, 1, seed + 1).column(0).into_owned() * 0.2;
            let est = toy_estimates(p, 20, seed + 2);
            let w = est.traditional_weights(1.0).unwrap();
            let b = PortfolioWeights::<f64>::equal(p).unwrap();
            let a = finite_sample_alpha(&w, &b, &mu, &sigma, Beta::Finite(beta)).unwrap();
            let ua = utility(&mix(a, &w, &b), &mu, &sigma, beta);
            prop_assert!(ua >= utility(w.weights(), &mu, &sigma, beta) - 1e-12);
            prop_assert!(ua >= utility(b.weights(), &mu, &sigma, beta) - 1e-12);
            let d = w.weights() - b.weights();
            prop_assert!(sigma.quadratic(&d) > 0.0);
        }

        #[test]
        fn gse_preserves_budget(alpha in -5.0..5.0f64, seed in 0u64..1000) {
            let raw = gaussian(7, 1, seed).column(0).into_owned();
            let w = PortfolioWeights::from_budget_vector(raw, Provenance::Traditional).unwrap();
            let b = PortfolioWeights::<f64>::equal(7).unwrap();
            let g = gse_weights(alpha, &w, &b, Provenance::BonaFide).unwrap();
            prop_assert!((g.weights().sum() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn large_beta_gap_is_first_order((f, t, c, gamma) in frontier_strategy()) {
            let at = |b| oracle_alpha_limit(&f, &t, c, gamma, b);
            if let (Ok(inf), Ok(a6), Ok(a8)) = (at(Beta::Infinite), at(Beta::Finite(1e6)), at(Beta::Finite(1e8))) {
                let (g6, g8) = (1e6 * (a6 - inf), 1e8 * (a8 - inf));
                prop_assert!((g6 - g8).abs() <= 1e-6 * g6.abs() + 1e-6 * (1.0 + inf.abs()), "{g6} vs {g8}");
            }
        }

        #[test]
        fn limit_continuous_in_beta((f, t, c, gamma) in frontier_strategy(), beta in 0.1..10.0f64) {
            if let (Ok(a), Ok(b)) = (
                oracle_alpha_limit(&f, &t, c, gamma, Beta::Finite(beta)),
                oracle_alpha_limit(&f, &t, c, gamma, Beta::Finite(beta * (1.0 + 1e-9))),
            ) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
    }
}

//! Expected utility and asymptotic relative losses.

use crate::error::{Error, Result};
use crate::frontier::{FrontierParams, TargetStats};
use crate::scalar::Real;
use crate::shrinkage::{regime_of, Regime};
use crate::types::{PortfolioWeights, SymmetricMatrix};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// `w' mu - gamma / 2 * w' Sigma w`.
pub fn utility<T: Real>(
    w: &PortfolioWeights<T>,
    mu: &DVector<T>,
    sigma: &SymmetricMatrix<T>,
    gamma: T,
) -> T {
    utility_of(w.weights(), mu, sigma, gamma)
}

pub(crate) fn utility_of<T: Real>(
    w: &DVector<T>,
    mu: &DVector<T>,
    sigma: &SymmetricMatrix<T>,
    gamma: T,
) -> T {
    w.dot(mu) - gamma / T::lit(2.0) * sigma.quadratic(w)
}

/// Utility of the true expected-utility portfolio:
/// `R_GMV + s / (2 gamma) - gamma / 2 * V_GMV`.
pub fn eu_utility<T: Real>(frontier: &FrontierParams<T>, gamma: T) -> T {
    let two = T::lit(2.0);
    frontier.r_gmv + frontier.s / (two * gamma) - gamma / two * frontier.v_gmv
}

fn positive_eu_utility<T: Real>(frontier: &FrontierParams<T>, gamma: T) -> Result<T> {
    if !(gamma > T::zero()) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let u = eu_utility(frontier, gamma);
    if !(u > T::zero()) {
        return Err(Error::RelativeLossUndefined(u.as_f64()));
    }
    Ok(u)
}

/// `(1/(1-c), 1/(1-c), 1/(1-c)^3)` for `c < 1` and
/// `(1/(c(c-1)), c^2/(c-1), 1/(c-1)^3)` for `c > 1`.
fn factors<T: Real>(c: T) -> Result<(T, T, T)> {
    let one = T::one();
    Ok(match regime_of(c)? {
        Regime::BelowOne => {
            let m = one - c;
            (one / m, one / m, one / (m * m * m))
        }
        Regime::AboveOne => {
            let m = c - one;
            (one / (c * m), c * c / m, one / (m * m * m))
        }
    })
}

/// Limit of `(U_EU - U_S) / U_EU` for the traditional estimator.
pub fn relative_loss_traditional<T: Real>(
    c: T,
    frontier: &FrontierParams<T>,
    gamma: T,
) -> Result<T> {
    let u = positive_eu_utility(frontier, gamma)?;
    let (k1, kv, k3) = factors(c)?;
    let half = T::lit(0.5);
    let gi = T::one() / gamma;
    let num = gamma * half * (kv - T::one()) * frontier.v_gmv
        + gi * (half - k1 + half * k3) * frontier.s
        + half * gi * c * k3;
    Ok(num / u)
}

/// `(U_EU - U_b) / U_EU` for a target with return `R_b` and variance `V_b`.
pub fn relative_loss_target<T: Real>(
    frontier: &FrontierParams<T>,
    tstats: &TargetStats<T>,
    gamma: T,
) -> Result<T> {
    let u = positive_eu_utility(frontier, gamma)?;
    let u_b = tstats.r_b - gamma / T::lit(2.0) * tstats.v_b;
    Ok((u - u_b) / u)
}

/// `alpha^2 L_S + (1 - alpha)^2 L_b`.
///
/// This drops the interaction between the estimation error of `w_hat` and the
/// target's distance from the optimum; see [`relative_loss_gse_exact`].
pub fn relative_loss_gse<T: Real>(alpha: T, l_s: T, l_b: T) -> T {
    let beta = T::one() - alpha;
    alpha * alpha * l_s + beta * beta * l_b
}

/// Limit of `gamma / 2 * (w_hat - w_EU)' Sigma (b - w_EU) / U_EU`:
/// `(1 - k) (gamma^{-1} (R_GMV - R_b) + gamma^{-2} s) * gamma / (2 U_EU)`
/// with `k = 1/(1-c)` or `1/(c(c-1))`.
pub fn relative_loss_cross<T: Real>(
    c: T,
    frontier: &FrontierParams<T>,
    tstats: &TargetStats<T>,
    gamma: T,
) -> Result<T> {
    let u = positive_eu_utility(frontier, gamma)?;
    let (k1, _, _) = factors(c)?;
    let gi = T::one() / gamma;
    let x = (T::one() - k1) * (gi * (frontier.r_gmv - tstats.r_b) + gi * gi * frontier.s);
    Ok(gamma / T::lit(2.0) * x / u)
}

/// Limit relative loss of `alpha w_hat + (1 - alpha) b` including the cross
/// term: `alpha^2 L_S + (1 - alpha)^2 L_b + 2 alpha (1 - alpha) L_x`.
pub fn relative_loss_gse_exact<T: Real>(
    alpha: T,
    c: T,
    frontier: &FrontierParams<T>,
    tstats: &TargetStats<T>,
    gamma: T,
) -> Result<T> {
    let l_s = relative_loss_traditional(c, frontier, gamma)?;
    let l_b = relative_loss_target(frontier, tstats, gamma)?;
    let l_x = relative_loss_cross(c, frontier, tstats, gamma)?;
    Ok(relative_loss_gse(alpha, l_s, l_b) + T::lit(2.0) * alpha * (T::one() - alpha) * l_x)
}

/// Relative losses of the traditional, target and shrinkage portfolios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub alpha: T,
    pub l_s: T,
    pub l_b: T,
    /// `alpha^2 l_s + (1 - alpha)^2 l_b`.
    pub l_gse: T,
    /// Including the cross term.
    pub l_gse_exact: T,
    pub u_eu: T,
}

pub fn loss_report<T: Real>(
    c: T,
    frontier: &FrontierParams<T>,
    tstats: &TargetStats<T>,
    gamma: T,
    alpha: T,
) -> Result<LossReport<T>> {
    let l_s = relative_loss_traditional(c, frontier, gamma)?;
    let l_b = relative_loss_target(frontier, tstats, gamma)?;
    Ok(LossReport {
        alpha,
        l_s,
        l_b,
        l_gse: relative_loss_gse(alpha, l_s, l_b),
        l_gse_exact: relative_loss_gse_exact(alpha, c, frontier, tstats, gamma)?,
        u_eu: eu_utility(frontier, gamma),
    })
}

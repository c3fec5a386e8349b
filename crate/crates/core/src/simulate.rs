//! Data-generating process, loss-curve experiments and numerical checks of
//! the random-matrix limits behind the intensity formulas. `f64` only.

use crate::error::{Error, Result};
use crate::frontier::{true_frontier, FrontierParams, TargetStats};
use crate::inverse::{
    generalized_inverse_from_innovations, spd_inverse, symmetric_sqrt, symmetric_sqrt_pair,
};
use crate::loss::{
    eu_utility, relative_loss_gse, relative_loss_gse_exact, relative_loss_target,
    relative_loss_traditional, utility_of,
};
use crate::moments::mean_of_columns;
use crate::shrinkage::{
    bona_fide_fit, eu_weights_true, finite_sample_alpha, gse_weights, oracle_alpha_limit,
    regime_of, sample_estimates, sample_eu_weights, Beta, Calibration, CalibrationMode, Regime,
};
use crate::types::{MatrixKind, PortfolioWeights, Provenance, ReturnsMatrix, SymmetricMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Seeded generator for one `(seed, stream)` pair.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_id(cell: usize, rep: usize) -> u64 {
    ((cell as u64) << 32) | rep as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    Diagonal,
    RandomOrthogonal,
}

/// Covariance spectrum `lambda_i = lambda_min * CI^{(i-1)/(p-1)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub p: usize,
    pub condition_index: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_rotation")]
    pub rotation: Rotation,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda_min() -> f64 {
    0.1
}

fn default_rotation() -> Rotation {
    Rotation::RandomOrthogonal
}

impl SpectrumSpec {
    pub fn new(p: usize, condition_index: f64) -> Self {
        Self {
            p,
            condition_index,
            lambda_min: default_lambda_min(),
            rotation: default_rotation(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidInput("spectrum needs p >= 1".into()));
        }
        if !(self.condition_index >= 1.0) || !self.condition_index.is_finite() {
            return Err(Error::InvalidInput(format!(
                "condition index must be >= 1, got {}",
                self.condition_index
            )));
        }
        if !(self.lambda_min > 0.0) {
            return Err(Error::InvalidInput("lambda_min must be positive".into()));
        }
        Ok(())
    }

    /// Ascending eigenvalues. The exponent is scaled so that
    /// `lambda_p / lambda_1` equals the condition index exactly.
    pub fn eigenvalues(&self) -> Vec<f64> {
        if self.p == 1 {
            return vec![self.lambda_min];
        }
        let delta = self.condition_index.ln() * self.p as f64 / (self.p - 1) as f64;
        (0..self.p)
            .map(|i| self.lambda_min * (delta * i as f64 / self.p as f64).exp())
            .collect()
    }
}

/// Random orthogonal matrix: QR of a Gaussian matrix with `diag(R) > 0`.
pub fn random_orthogonal(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn make_covariance(spec: &SpectrumSpec) -> Result<SymmetricMatrix<f64>> {
    spec.validate()?;
    let lambda = spec.eigenvalues();
    Ok(match spec.rotation {
        Rotation::Diagonal => SymmetricMatrix::from_diagonal(&lambda, MatrixKind::Covariance),
        Rotation::RandomOrthogonal => {
            let mut rng = rng_for(spec.seed, u64::MAX);
            let q = random_orthogonal(spec.p, &mut rng);
            let ql = DMatrix::from_fn(spec.p, spec.p, |i, j| q[(i, j)] * lambda[j]);
            SymmetricMatrix::symmetrized(ql * q.transpose(), MatrixKind::Covariance)
        }
    })
}

/// Means equally spaced on `[lo, hi]`; the midpoint when `p = 1`.
pub fn make_means(p: usize, range: (f64, f64)) -> Result<DVector<f64>> {
    if p == 0 {
        return Err(Error::InvalidInput("means need p >= 1".into()));
    }
    let (lo, hi) = range;
    if p == 1 {
        return Ok(DVector::from_element(1, 0.5 * (lo + hi)));
    }
    Ok(DVector::from_fn(p, |i, _| {
        if i == p - 1 {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (p - 1) as f64
        }
    }))
}

/// Distribution of the standardized innovations `X`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Innovation {
    #[default]
    Gaussian,
    /// Student t scaled to unit variance; requires `df > 4`.
    StudentT { df: f64 },
}

impl Innovation {
    pub fn student_t() -> Self {
        Innovation::StudentT { df: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if let Innovation::StudentT { df } = *self {
            if !(df > 4.0) || !df.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "student t innovations need df > 4, got {df}"
                )));
            }
        }
        Ok(())
    }

    /// `p x n` matrix of i.i.d. draws, filled column by column.
    pub fn sample(&self, p: usize, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(match *self {
            Innovation::Gaussian => {
                DMatrix::from_iterator(p, n, (0..p * n).map(|_| StandardNormal.sample(rng)))
            }
            Innovation::StudentT { df } => {
                let t = StudentT::new(df)
                    .map_err(|e| Error::InvalidInput(format!("student t: {e}")))?;
                let scale = ((df - 2.0) / df).sqrt();
                DMatrix::from_iterator(p, n, (0..p * n).map(|_| t.sample(rng) * scale))
            }
        })
    }
}

fn default_mu_range() -> (f64, f64) {
    (-0.3, 0.3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(default = "default_mu_range")]
    pub mu_range: (f64, f64),
    #[serde(default)]
    pub distribution: Innovation,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { mu_range: default_mu_range(), distribution: Innovation::Gaussian, n, seed }
    }
}

/// `Y = mu 1' + Sigma^{1/2} X` with a precomputed symmetric square root.
#[derive(Debug, Clone)]
pub struct DataGenerator {
    mu: DVector<f64>,
    root: Root,
    innovation: Innovation,
}

#[derive(Debug, Clone)]
enum Root {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl DataGenerator {
    pub fn new(mu: DVector<f64>, sigma: &SymmetricMatrix<f64>, innovation: Innovation) -> Result<Self> {
        innovation.validate()?;
        if mu.len() != sigma.dim() {
            return Err(Error::DimensionMismatch { expected: sigma.dim(), actual: mu.len() });
        }
        let s = sigma.data();
        let p = sigma.dim();
        let diagonal = (0..p).all(|i| (0..p).all(|j| i == j || s[(i, j)] == 0.0));
        let root = if diagonal {
            if s.diagonal().iter().any(|&d| d < 0.0) {
                return Err(Error::InvalidInput("covariance has a negative variance".into()));
            }
            Root::Diagonal(s.diagonal().map(f64::sqrt))
        } else {
            Root::Dense(symmetric_sqrt(sigma))
        };
        Ok(Self { mu, root, innovation })
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    /// Returns `(Y, X)`.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Result<(ReturnsMatrix<f64>, DMatrix<f64>)> {
        let x = self.innovation.sample(self.p(), n, rng)?;
        let mut y = match &self.root {
            Root::Diagonal(d) => {
                let mut y = x.clone();
                for mut col in y.column_iter_mut() {
                    col.component_mul_assign(d);
                }
                y
            }
            Root::Dense(r) => r * &x,
        };
        for mut col in y.column_iter_mut() {
            col += &self.mu;
        }
        Ok((ReturnsMatrix::new(y)?, x))
    }
}

pub fn generate_returns(
    mu: &DVector<f64>,
    sigma: &SymmetricMatrix<f64>,
    dgp: &DgpSpec,
) -> Result<ReturnsMatrix<f64>> {
    let gen = DataGenerator::new(mu.clone(), sigma, dgp.distribution)?;
    let mut rng = rng_for(dgp.seed, 0);
    Ok(gen.draw(dgp.n, &mut rng)?.0)
}

// ---------------------------------------------------------------------------
// Random-matrix limits

/// Fixed unit-norm probe vectors for the bilinear forms.
#[derive(Debug, Clone)]
pub struct Probes {
    pub theta: DVector<f64>,
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
}

impl Probes {
    /// `theta ~ 1`, `xi ~ linspace(1, 2)`, `eta ~ 1 + sin(i)`, all normalized.
    pub fn standard(p: usize) -> Self {
        let unit = |v: DVector<f64>| {
            let norm = v.norm();
            v / norm
        };
        let denom = (p.max(2) - 1) as f64;
        Self {
            theta: unit(DVector::from_element(p, 1.0)),
            xi: unit(DVector::from_fn(p, |i, _| 1.0 + i as f64 / denom)),
            eta: unit(DVector::from_fn(p, |i, _| 1.0 + ((i + 1) as f64).sin())),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        for (name, v) in [("theta", &self.theta), ("xi", &self.xi), ("eta", &self.eta)] {
            if v.len() != p {
                return Err(Error::DimensionMismatch { expected: p, actual: v.len() });
            }
            if (v.norm() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidInput(format!("probe {name} must have unit norm")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lemma {
    /// `XX'/n`, inverse.
    L2,
    /// `XX'/n - xbar xbar'`, inverse.
    L3,
    /// Projection of the Lemma 3 inverse.
    L4,
    /// `XX'/n`, Moore-Penrose.
    L5,
    /// `XX'/n - xbar xbar'`, Moore-Penrose.
    L6,
    /// Projection of the Lemma 6 pseudo-inverse.
    L7,
}

impl Lemma {
    pub fn for_regime(regime: Regime) -> &'static [Lemma] {
        match regime {
            Regime::BelowOne => &[Lemma::L2, Lemma::L3, Lemma::L4],
            Regime::AboveOne => &[Lemma::L5, Lemma::L6, Lemma::L7],
        }
    }

    fn regime(self) -> Regime {
        match self {
            Lemma::L2 | Lemma::L3 | Lemma::L4 => Regime::BelowOne,
            _ => Regime::AboveOne,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Lemma::L2 => 2,
            Lemma::L3 => 3,
            Lemma::L4 => 4,
            Lemma::L5 => 5,
            Lemma::L6 => 6,
            Lemma::L7 => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tolerance {
    Relative(f64),
    Absolute(f64),
    /// Algebraic identity, checked on every draw.
    Exact(f64),
}

impl Tolerance {
    pub fn admits(&self, empirical: f64, limit: f64) -> bool {
        let gap = (empirical - limit).abs();
        match *self {
            Tolerance::Relative(r) => gap <= r * limit.abs(),
            Tolerance::Absolute(a) | Tolerance::Exact(a) => gap <= a,
        }
    }
}

/// Default tolerances: relative for nonzero limits, absolute for zero
/// limits, and a tight bound for the exact identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmtTolerances {
    pub relative: f64,
    pub absolute: f64,
    pub exact: f64,
}

impl Default for RmtTolerances {
    fn default() -> Self {
        Self { relative: 0.07, absolute: 0.02, exact: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmtRow {
    pub lemma: u8,
    pub quantity: String,
    pub empirical: f64,
    pub limit: f64,
    pub gap: f64,
    /// Median over seeds of the per-seed absolute gap.
    pub median_abs_gap: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LimitKind {
    Zero,
    Exact,
    Value,
}

struct RawRow {
    lemma: Lemma,
    quantity: &'static str,
    value: f64,
    limit: f64,
    kind: LimitKind,
}

/// Applies a symmetric operator to a vector.
trait Apply {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

struct Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>);

impl Apply for Chol {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.0.solve(v)
    }
}

/// `(XX'/n)^+ v = (1/n) X G^{-2} X' v` with `G = X'X/n`.
struct GramPinv<'a> {
    x: &'a DMatrix<f64>,
    g: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    n: f64,
}

impl Apply for GramPinv<'_> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = self.x.tr_mul(v);
        let t = self.g.solve(&self.g.solve(&t));
        self.x * t / self.n
    }
}

/// Rank-one downdate of an inverse-like operator by `xbar`: Sherman-Morrison
/// for an inverse, the three-term Meyer update for a pseudo-inverse.
struct Downdated<'a, A: Apply> {
    base: &'a A,
    u: DVector<f64>,
    w: DVector<f64>,
    a: f64,
    b2: f64,
    b3: f64,
    meyer: bool,
}

impl<'a, A: Apply> Downdated<'a, A> {
    fn new(base: &'a A, xbar: &DVector<f64>, meyer: bool) -> Self {
        let u = base.apply(xbar);
        let w = base.apply(&u);
        let a = xbar.dot(&u);
        let b2 = u.dot(&u);
        let b3 = u.dot(&w);
        Self { base, u, w, a, b2, b3, meyer }
    }
}

impl<A: Apply> Apply for Downdated<'_, A> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let bv = self.base.apply(v);
        let uv = self.u.dot(v);
        if self.meyer {
            let wv = self.w.dot(v);
            bv - &self.u * (wv / self.b2) - &self.w * (uv / self.b2)
                + &self.u * (self.b3 * uv / (self.b2 * self.b2))
        } else {
            bv + &self.u * (uv / (1.0 - self.a))
        }
    }
}

/// `M - M eta eta' M / eta' M eta`.
struct Projected<'a, A: Apply> {
    base: &'a A,
    m_eta: DVector<f64>,
    denom: f64,
}

impl<'a, A: Apply> Projected<'a, A> {
    fn new(base: &'a A, eta: &DVector<f64>) -> Self {
        let m_eta = base.apply(eta);
        let denom = eta.dot(&m_eta);
        Self { base, m_eta, denom }
    }
}

impl<A: Apply> Apply for Projected<'_, A> {
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mv = self.base.apply(v);
        let coef = self.m_eta.dot(v) / self.denom;
        mv - &self.m_eta * coef
    }
}

/// The five standard forms `xi'A theta, xbar'A xbar, xbar'A theta,
/// xi'A^2 theta, xbar'A^2 xbar`.
fn standard_forms(
    op: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    xi: &DVector<f64>,
    theta: &DVector<f64>,
    xbar: &DVector<f64>,
) -> [f64; 5] {
    let a_theta = op(theta);
    let a_xi = op(xi);
    let a_x = op(xbar);
    [xi.dot(&a_theta), xbar.dot(&a_x), xbar.dot(&a_theta), a_xi.dot(&a_theta), a_x.dot(&a_x)]
}

const NAMES_INV: [[&str; 5]; 3] = [
    ["xi'Vt^-1 theta", "xbar'Vt^-1 xbar", "xbar'Vt^-1 theta", "xi'Vt^-2 theta", "xbar'Vt^-2 xbar"],
    ["xi'V^-1 theta", "xbar'V^-1 xbar", "xbar'V^-1 theta", "xi'V^-2 theta", "xbar'V^-2 xbar"],
    ["xi'P theta", "xbar'P xbar", "xbar'P theta", "xi'P^2 theta", "xbar'P^2 xbar"],
];

const NAMES_PINV: [[&str; 5]; 3] = [
    ["xi'Vt^+ theta", "xbar'Vt^+ xbar", "xbar'Vt^+ theta", "xi'(Vt^+)^2 theta", "xbar'(Vt^+)^2 xbar"],
    ["xi'V^+ theta", "xbar'V^+ xbar", "xbar'V^+ theta", "xi'(V^+)^2 theta", "xbar'(V^+)^2 xbar"],
    ["xi'P^+ theta", "xbar'P^+ xbar", "xbar'P^+ theta", "xi'(P^+)^2 theta", "xbar'(P^+)^2 xbar"],
];

fn push_forms(
    out: &mut Vec<RawRow>,
    lemma: Lemma,
    names: &[&'static str; 5],
    values: [f64; 5],
    limits: [f64; 5],
    kinds: [LimitKind; 5],
) {
    for i in 0..5 {
        out.push(RawRow { lemma, quantity: names[i], value: values[i], limit: limits[i], kind: kinds[i] });
    }
}

fn rmt_draw(
    p: usize,
    n: usize,
    probes: &Probes,
    lemmas: &[Lemma],
    innovation: Innovation,
    rng: &mut impl Rng,
) -> Result<Vec<RawRow>> {
    use LimitKind::{Exact, Value, Zero};
    let c = p as f64 / n as f64;
    let x = innovation.sample(p, n, rng)?;
    let xbar = mean_of_columns(&x);
    let nf = n as f64;
    let (xi, theta, eta) = (&probes.xi, &probes.theta, &probes.eta);
    let xt = xi.dot(theta);
    let xt_eta = xt - xi.dot(eta) * eta.dot(theta) / eta.dot(eta);
    let mut rows = Vec::new();
    match regime_of(c)? {
        Regime::BelowOne => {
            let vt = x.clone() * x.transpose() / nf;
            let chol = vt.cholesky().ok_or(Error::NotPositiveDefinite)?;
            let base = Chol(chol);
            let k1 = 1.0 / (1.0 - c);
            let k3 = k1 * k1 * k1;
            let v = Downdated::new(&base, &xbar, false);
            let pm = Projected::new(&v, eta);
            for &lemma in lemmas {
                let (names, values, limits) = match lemma {
                    Lemma::L2 => (
                        &NAMES_INV[0],
                        standard_forms(&|u| base.apply(u), xi, theta, &xbar),
                        [k1 * xt, c, 0.0, k3 * xt, c * k1],
                    ),
                    Lemma::L3 => (
                        &NAMES_INV[1],
                        standard_forms(&|u| v.apply(u), xi, theta, &xbar),
                        [k1 * xt, c * k1, 0.0, k3 * xt, c * k3],
                    ),
                    Lemma::L4 => (
                        &NAMES_INV[2],
                        standard_forms(&|u| pm.apply(u), xi, theta, &xbar),
                        [k1 * xt_eta, c * k1, 0.0, k3 * xt_eta, c * k3],
                    ),
                    other => {
                        return Err(Error::RegimeMismatch(format!(
                            "lemma {} needs p > n, got c = {c}",
                            other.number()
                        )))
                    }
                };
                push_forms(&mut rows, lemma, names, values, limits, [Value, Value, Zero, Value, Value]);
            }
        }
        Regime::AboveOne => {
            let g = x.tr_mul(&x) / nf;
            let g = g.cholesky().ok_or(Error::NotPositiveDefinite)?;
            let base = GramPinv { x: &x, g, n: nf };
            let cm1 = c - 1.0;
            let k1 = 1.0 / (c * cm1);
            let k3 = 1.0 / (cm1 * cm1 * cm1);
            let v = Downdated::new(&base, &xbar, true);
            let pm = Projected::new(&v, eta);
            for &lemma in lemmas {
                match lemma {
                    Lemma::L5 => {
                        let values = standard_forms(&|u| base.apply(u), xi, theta, &xbar);
                        push_forms(
                            &mut rows,
                            lemma,
                            &NAMES_PINV[0],
                            values,
                            [k1 * xt, 1.0, 0.0, k3 * xt, 1.0 / cm1],
                            [Value, Exact, Zero, Value, Value],
                        );
                        let v1 = base.apply(&xbar);
                        let v2 = base.apply(&v1);
                        rows.push(RawRow {
                            lemma,
                            quantity: "xbar'(Vt^+)^3 xbar",
                            value: v1.dot(&v2),
                            limit: c * k3,
                            kind: Value,
                        });
                        rows.push(RawRow {
                            lemma,
                            quantity: "xbar'(Vt^+)^4 xbar",
                            value: v2.dot(&v2),
                            limit: c * (c + 1.0) / cm1.powi(5),
                            kind: Value,
                        });
                    }
                    Lemma::L6 => push_forms(
                        &mut rows,
                        lemma,
                        &NAMES_PINV[1],
                        standard_forms(&|u| v.apply(u), xi, theta, &xbar),
                        [k1 * xt, 1.0 / cm1, 0.0, k3 * xt, c * k3],
                        [Value, Value, Zero, Value, Value],
                    ),
                    Lemma::L7 => push_forms(
                        &mut rows,
                        lemma,
                        &NAMES_PINV[2],
                        standard_forms(&|u| pm.apply(u), xi, theta, &xbar),
                        [k1 * xt_eta, 1.0 / cm1, 0.0, k3 * xt_eta, c * k3],
                        [Value, Value, Zero, Value, Value],
                    ),
                    other => {
                        return Err(Error::RegimeMismatch(format!(
                            "lemma {} needs p < n, got c = {c}",
                            other.number()
                        )))
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn tolerance_for(kind: LimitKind, tol: &RmtTolerances) -> Tolerance {
    match kind {
        LimitKind::Zero => Tolerance::Absolute(tol.absolute),
        LimitKind::Exact => Tolerance::Exact(tol.exact),
        LimitKind::Value => Tolerance::Relative(tol.relative),
    }
}

/// Settings for [`verify_rmt_limits`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmtSpec {
    pub p: usize,
    pub n: usize,
    /// Seeds whose per-row median is compared with the limit.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub innovation: Innovation,
    /// Defaults to the lemmas of the regime of `p / n`.
    #[serde(default)]
    pub lemmas: Option<Vec<Lemma>>,
    #[serde(default)]
    pub tolerances: RmtTolerances,
}

impl RmtSpec {
    pub fn new(p: usize, n: usize, seeds: std::ops::Range<u64>) -> Self {
        Self {
            p,
            n,
            seeds: seeds.collect(),
            innovation: Innovation::Gaussian,
            lemmas: None,
            tolerances: RmtTolerances::default(),
        }
    }
}

/// Evaluates the random-matrix limits on simulated innovations.
///
/// Each row holds the median over seeds of the empirical form, its analytic
/// limit and the absolute gap. The exact identity `xbar'(XX'/n)^+ xbar = 1`
/// is reported with its worst gap over seeds instead of the median.
pub fn verify_rmt_limits(spec: &RmtSpec, probes: &Probes) -> Result<Vec<RmtRow>> {
    if spec.p == 0 || spec.n < 2 {
        return Err(Error::InvalidInput("verification needs p >= 1 and n >= 2".into()));
    }
    if spec.seeds.is_empty() {
        return Err(Error::InvalidInput("verification needs at least one seed".into()));
    }
    probes.validate(spec.p)?;
    let regime = regime_of(spec.p as f64 / spec.n as f64)?;
    let lemmas: Vec<Lemma> = match &spec.lemmas {
        Some(l) => l.clone(),
        None => Lemma::for_regime(regime).to_vec(),
    };
    if let Some(bad) = lemmas.iter().find(|l| l.regime() != regime) {
        return Err(Error::RegimeMismatch(format!(
            "lemma {} does not apply at p = {}, n = {}",
            bad.number(),
            spec.p,
            spec.n
        )));
    }
    let draws: Vec<Vec<RawRow>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = rng_for(seed, 0);
            rmt_draw(spec.p, spec.n, probes, &lemmas, spec.innovation, &mut rng)
        })
        .collect::<Result<_>>()?;
    let first = &draws[0];
    let mut out = Vec::with_capacity(first.len());
    for (k, row) in first.iter().enumerate() {
        let values: Vec<f64> = draws.iter().map(|d| d[k].value).collect();
        let tolerance = tolerance_for(row.kind, &spec.tolerances);
        let (empirical, gap, pass) = if row.kind == LimitKind::Exact {
            let worst = values
                .iter()
                .copied()
                .max_by(|a, b| (a - row.limit).abs().total_cmp(&(b - row.limit).abs()))
                .unwrap_or(f64::NAN);
            let gap = (worst - row.limit).abs();
            (worst, gap, values.iter().all(|&v| tolerance.admits(v, row.limit)))
        } else {
            let m = median(&values);
            (m, (m - row.limit).abs(), tolerance.admits(m, row.limit))
        };
        let abs_gaps: Vec<f64> = values.iter().map(|v| (v - row.limit).abs()).collect();
        out.push(RmtRow {
            lemma: row.lemma.number(),
            quantity: row.quantity.to_string(),
            empirical,
            limit: row.limit,
            gap,
            median_abs_gap: median(&abs_gaps),
            tolerance,
            pass,
        });
    }
    Ok(out)
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Loss experiments

/// True parameters and target for one `(p, n)` cell.
#[derive(Debug, Clone)]
pub struct CellSetup {
    pub p: usize,
    pub n: usize,
    /// `p / n` as realized by the integer sizes.
    pub c: f64,
    pub gamma: f64,
    pub mu: DVector<f64>,
    pub sigma: SymmetricMatrix<f64>,
    pub sigma_inv_sqrt: DMatrix<f64>,
    pub frontier: FrontierParams<f64>,
    pub target: PortfolioWeights<f64>,
    pub target_stats: TargetStats<f64>,
    pub u_eu: f64,
    pub generator: DataGenerator,
}

impl CellSetup {
    /// Builds a cell with equally weighted target.
    pub fn new(
        p: usize,
        n: usize,
        spectrum: &SpectrumSpec,
        mu_range: (f64, f64),
        innovation: Innovation,
        gamma: f64,
    ) -> Result<Self> {
        let mut spectrum = *spectrum;
        spectrum.p = p;
        let sigma = make_covariance(&spectrum)?;
        let mu = make_means(p, mu_range)?;
        Self::from_parts(n, mu, sigma, innovation, gamma)
    }

    pub fn from_parts(
        n: usize,
        mu: DVector<f64>,
        sigma: SymmetricMatrix<f64>,
        innovation: Innovation,
        gamma: f64,
    ) -> Result<Self> {
        let p = sigma.dim();
        if n < 2 {
            return Err(Error::InsufficientObservations(n));
        }
        let c = p as f64 / n as f64;
        regime_of(c)?;
        let frontier = true_frontier(&mu, &sigma)?;
        let target = PortfolioWeights::equal(p)?;
        let w = target.weights();
        let target_stats = TargetStats { r_b: w.dot(&mu), v_b: sigma.quadratic(w) };
        let u_eu = eu_utility(&frontier, gamma);
        if !(u_eu > 0.0) {
            return Err(Error::RelativeLossUndefined(u_eu));
        }
        let (_, sigma_inv_sqrt) = symmetric_sqrt_pair(&sigma)?;
        let generator = DataGenerator::new(mu.clone(), &sigma, innovation)?;
        Ok(Self {
            p,
            n,
            c,
            gamma,
            mu,
            sigma,
            sigma_inv_sqrt,
            frontier,
            target,
            target_stats,
            u_eu,
            generator,
        })
    }

    /// `beta` with the Sharpe calibration computed from the true frontier.
    pub fn beta(&self, mode: Calibration) -> Result<Beta<f64>> {
        match mode {
            Calibration::MeanVariance => Ok(Beta::Finite(self.gamma)),
            Calibration::MinVariance => Ok(Beta::Infinite),
            Calibration::SharpeRatio => {
                let b = self.frontier.r_gmv / self.frontier.v_gmv;
                if self.frontier.r_gmv > 0.0 && b.is_finite() {
                    Ok(Beta::Finite(b))
                } else {
                    Err(Error::SharpeCalibrationUndefined)
                }
            }
        }
    }

    pub fn alpha_limit(&self, mode: Calibration) -> Result<f64> {
        oracle_alpha_limit(&self.frontier, &self.target_stats, self.c, self.gamma, self.beta(mode)?)
    }

    pub fn relative_loss(&self, w: &DVector<f64>) -> f64 {
        (self.u_eu - utility_of(w, &self.mu, &self.sigma, self.gamma)) / self.u_eu
    }

    /// Limit relative loss of the traditional estimator.
    pub fn loss_traditional_limit(&self) -> Result<f64> {
        relative_loss_traditional(self.c, &self.frontier, self.gamma)
    }

    pub fn loss_target(&self) -> Result<f64> {
        relative_loss_target(&self.frontier, &self.target_stats, self.gamma)
    }

    /// One replication: draws data and evaluates every strategy per mode.
    pub fn replicate(&self, modes: &[Calibration], rng: &mut impl Rng) -> Result<Replication> {
        let (y, x) = self.generator.draw(self.n, rng)?;
        let est = sample_estimates(&y)?;
        let traditional = est.traditional_weights(self.gamma)?;
        // The oracle estimator uses S^{-1} below one and S* above.
        let oracle_base = match est.regime {
            Regime::BelowOne => traditional.clone(),
            Regime::AboveOne => {
                let s_star = generalized_inverse_from_innovations(&self.sigma_inv_sqrt, &x);
                sample_eu_weights(&s_star, &est.ybar, self.gamma)?
            }
        };
        let mut per_mode = Vec::with_capacity(modes.len());
        for &mode in modes {
            let mut out = ModeOutcome { mode, ..ModeOutcome::default() };
            if let Ok(beta) = self.beta(mode) {
                if let Ok(a) =
                    finite_sample_alpha(&oracle_base, &self.target, &self.mu, &self.sigma, beta)
                {
                    out.alpha_oracle = Some(a);
                    if let Ok(w) = gse_weights(a, &oracle_base, &self.target, Provenance::OracleShrunk)
                    {
                        out.loss_oracle = Some(self.relative_loss(w.weights()));
                    }
                }
                let mut cal = CalibrationMode::new(mode, self.gamma)?;
                if let Beta::Finite(b) = beta {
                    if mode == Calibration::SharpeRatio {
                        cal = cal.with_beta(b)?;
                    }
                }
                match bona_fide_fit(&est, &self.target, &cal) {
                    Ok(fit) => {
                        out.alpha_bona_fide = Some(fit.alpha);
                        out.loss_bona_fide = Some(self.relative_loss(fit.bona_fide.weights()));
                    }
                    Err(e) => log::debug!("bona fide fit failed: {e}"),
                }
            }
            per_mode.push(out);
        }
        Ok(Replication {
            loss_traditional: self.relative_loss(traditional.weights()),
            loss_traditional_oracle: self.relative_loss(oracle_base.weights()),
            per_mode,
        })
    }

    /// Runs `replications` independent draws; replication `r` uses the RNG
    /// stream `(cell << 32) | r` of `seed`, so results do not depend on the
    /// thread schedule.
    pub fn run(
        &self,
        modes: &[Calibration],
        replications: usize,
        seed: u64,
        cell: usize,
    ) -> Vec<Result<Replication>> {
        (0..replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng_for(seed, stream_id(cell, r));
                self.replicate(modes, &mut rng)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModeOutcome {
    pub mode: Calibration,
    pub alpha_oracle: Option<f64>,
    pub alpha_bona_fide: Option<f64>,
    pub loss_oracle: Option<f64>,
    pub loss_bona_fide: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    /// Sample EU weights from `S^{-1}` (`p < n`) or `S^+` (`p > n`).
    pub loss_traditional: f64,
    /// Sample EU weights from `S^{-1}` or `S*`.
    pub loss_traditional_oracle: f64,
    pub per_mode: Vec<ModeOutcome>,
}

/// Default concentration grid: 0.1..0.9 and 1.1..3.0 in steps of 0.1.
pub fn default_c_grid() -> Vec<f64> {
    (1..=9).chain(11..=30).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<f64>,
    pub p_grid: Vec<usize>,
    pub condition_index: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_rotation")]
    pub rotation: Rotation,
    #[serde(default = "default_mu_range")]
    pub mu_range: (f64, f64),
    #[serde(default)]
    pub innovation: Innovation,
    pub modes: Vec<Calibration>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma() -> f64 {
    1.0
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        if self.c_grid.is_empty() || self.p_grid.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidInput("empty grid or mode list".into()));
        }
        for &c in &self.c_grid {
            regime_of(c)?;
        }
        if let Some(&p) = self.p_grid.iter().find(|&&p| p == 0) {
            return Err(Error::InvalidInput(format!("invalid p = {p}")));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidInput("gamma must be positive".into()));
        }
        self.innovation.validate()
    }

    fn spectrum(&self) -> SpectrumSpec {
        SpectrumSpec {
            p: 0,
            condition_index: self.condition_index,
            lambda_min: self.lambda_min,
            rotation: self.rotation,
            seed: self.seed,
        }
    }
}

/// Sample size for a target concentration.
pub fn n_for(p: usize, c: f64) -> usize {
    ((p as f64 / c).round() as usize).max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub c: f64,
    pub p: usize,
    pub mode: Calibration,
    pub strategy: String,
    pub stat: String,
    pub value: f64,
    pub replications: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub c: f64,
    pub c_realized: f64,
    pub p: usize,
    pub n: usize,
    pub mode: Calibration,
    /// Set when the whole cell could not be evaluated.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub spec: ExperimentSpec,
    pub cells: Vec<CellSummary>,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    /// Looks up one statistic.
    pub fn value(&self, c: f64, p: usize, mode: Calibration, strategy: &str, stat: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                (r.c - c).abs() < 1e-12
                    && r.p == p
                    && r.mode == mode
                    && r.strategy == strategy
                    && r.stat == stat
            })
            .map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["c", "p", "mode", "strategy", "stat", "value", "replications", "seed"])
            .map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record([
                format!("{}", r.c),
                r.p.to_string(),
                mode_name(r.mode).to_string(),
                r.strategy.clone(),
                r.stat.clone(),
                format!("{:e}", r.value),
                r.replications.to_string(),
                r.seed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Metadata sidecar: the full spec plus cell-level outcomes.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "spec": self.spec,
            "cells": self.cells,
            "notes": "Figure-exact replication is not possible: the plotted grids are not published.",
        })
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn write_files(&self, csv_path: &Path, meta_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(csv_path, buf)?;
        let meta = serde_json::to_string_pretty(&self.metadata())
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(meta_path, meta)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

pub fn mode_name(m: Calibration) -> &'static str {
    match m {
        Calibration::MeanVariance => "mean_variance",
        Calibration::MinVariance => "min_variance",
        Calibration::SharpeRatio => "sharpe_ratio",
    }
}

fn summarize(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        None
    } else {
        Some((mean(values), median(values)))
    }
}

/// Relative-loss curves over a `(c, p)` grid for several calibration modes.
///
/// Cells that cannot be evaluated (for example a Sharpe calibration with a
/// non-positive GMV return) are flagged in [`CellSummary::error`]; failed
/// replications are counted per strategy.
pub fn run_loss_experiment(spec: &ExperimentSpec) -> Result<ExperimentTable> {
    spec.validate()?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut cell_index = 0usize;
    for &p in &spec.p_grid {
        for &c in &spec.c_grid {
            let n = n_for(p, c);
            let idx = cell_index;
            cell_index += 1;
            let setup = CellSetup::new(p, n, &spec.spectrum(), spec.mu_range, spec.innovation, spec.gamma);
            let setup = match setup {
                Ok(s) => s,
                Err(e) => {
                    for &mode in &spec.modes {
                        cells.push(CellSummary {
                            c,
                            c_realized: p as f64 / n as f64,
                            p,
                            n,
                            mode,
                            error: Some(e.name().to_string()),
                        });
                    }
                    continue;
                }
            };
            let reps = setup.run(&spec.modes, spec.replications, spec.seed, idx);
            let ok: Vec<&Replication> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();
            let failed = reps.len() - ok.len();
            let mut push = |mode, strategy: &str, stat: &str, value: f64| {
                rows.push(ExperimentRow {
                    c,
                    p,
                    mode,
                    strategy: strategy.to_string(),
                    stat: stat.to_string(),
                    value,
                    replications: spec.replications,
                    seed: spec.seed,
                })
            };
            for (k, &mode) in spec.modes.iter().enumerate() {
                let trad: Vec<f64> = ok.iter().map(|r| r.loss_traditional).collect();
                if let Some((m, med)) = summarize(&trad) {
                    push(mode, "traditional", "mean_loss", m);
                    push(mode, "traditional", "median_loss", med);
                }
                push(mode, "traditional", "failures", failed as f64);
                let pick = |f: &dyn Fn(&ModeOutcome) -> Option<f64>| -> Vec<f64> {
                    ok.iter().filter_map(|r| f(&r.per_mode[k])).collect()
                };
                for (strategy, alpha, loss) in [
                    (
                        "oracle",
                        pick(&|m: &ModeOutcome| m.alpha_oracle),
                        pick(&|m: &ModeOutcome| m.loss_oracle),
                    ),
                    (
                        "bona_fide",
                        pick(&|m: &ModeOutcome| m.alpha_bona_fide),
                        pick(&|m: &ModeOutcome| m.loss_bona_fide),
                    ),
                ] {
                    if let Some((m, med)) = summarize(&loss) {
                        push(mode, strategy, "mean_loss", m);
                        push(mode, strategy, "median_loss", med);
                    }
                    if let Some((m, med)) = summarize(&alpha) {
                        push(mode, strategy, "mean_alpha", m);
                        push(mode, strategy, "median_alpha", med);
                    }
                    push(mode, strategy, "failures", (spec.replications - loss.len()) as f64);
                }
                let mut error = None;
                match setup.loss_target() {
                    Ok(l) => {
                        push(mode, "target", "mean_loss", l);
                        push(mode, "target", "median_loss", l);
                    }
                    Err(e) => error = Some(e.name().to_string()),
                }
                if let Ok(l) = setup.loss_traditional_limit() {
                    push(mode, "theory", "traditional_loss", l);
                }
                match setup.alpha_limit(mode) {
                    Ok(a) => {
                        push(mode, "theory", "alpha", a);
                        if let (Ok(ls), Ok(lb)) = (setup.loss_traditional_limit(), setup.loss_target()) {
                            push(mode, "theory", "gse_loss", relative_loss_gse(a, ls, lb));
                        }
                        if let Ok(l) = relative_loss_gse_exact(
                            a,
                            setup.c,
                            &setup.frontier,
                            &setup.target_stats,
                            setup.gamma,
                        ) {
                            push(mode, "theory", "gse_loss_exact", l);
                        }
                    }
                    Err(e) => error = Some(e.name().to_string()),
                }
                cells.push(CellSummary { c, c_realized: setup.c, p, n, mode, error });
            }
        }
    }
    Ok(ExperimentTable { spec: spec.clone(), cells, rows })
}

/// Convenience used by tests and the command line: the true expected-utility
/// weights of a cell.
pub fn true_eu_weights(setup: &CellSetup) -> Result<PortfolioWeights<f64>> {
    eu_weights_true(&setup.mu, &setup.sigma, setup.gamma)
}

/// Inverse of the true covariance of a cell.
pub fn true_precision(setup: &CellSetup) -> Result<SymmetricMatrix<f64>> {
    spd_inverse(&setup.sigma)
}

//! Rolling-window backtests on real return panels: targets, performance
//! measures and paired comparisons. `f64` only.

use crate::error::{Error, Result};
use crate::moments::mean_of_columns;
use crate::shrinkage::{bona_fide_fit, sample_estimates, Calibration, CalibrationMode};
use crate::simulate::{csv_err, rng_for};
use crate::types::{PortfolioWeights, Provenance, ReturnsMatrix, SymmetricMatrix};
use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Asset returns with their dates, stored `p x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub returns: ReturnsMatrix<f64>,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, returns: ReturnsMatrix<f64>) -> Result<Self> {
        if dates.len() != returns.n() {
            return Err(Error::DimensionMismatch { expected: returns.n(), actual: dates.len() });
        }
        if assets.len() != returns.p() {
            return Err(Error::DimensionMismatch { expected: returns.p(), actual: assets.len() });
        }
        if let Some(i) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!("dates not strictly increasing at {}", dates[i + 1])));
        }
        Ok(Self { dates, assets, returns })
    }

    pub fn select_assets(&self, idx: &[usize]) -> Result<Self> {
        let returns = self.returns.select_assets(idx)?;
        let assets = idx.iter().map(|&i| self.assets[i].clone()).collect();
        Ok(Self { dates: self.dates.clone(), assets, returns })
    }
}

/// Factor returns, stored `n x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPanel {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub factors: DMatrix<f64>,
}

impl FactorPanel {
    /// Rows matching `dates`, in that order.
    pub fn aligned(&self, dates: &[NaiveDate]) -> Result<DMatrix<f64>> {
        let index: HashMap<NaiveDate, usize> =
            self.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let rows: Vec<usize> = dates
            .iter()
            .map(|d| {
                index
                    .get(d)
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("no factor returns for {d}")))
            })
            .collect::<Result<_>>()?;
        Ok(self.factors.select_rows(rows.iter()))
    }
}

/// Realized portfolio returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: dates.len(), actual: values.len() });
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("series dates must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("series values must be finite".into()));
        }
        Ok(Self { dates, values })
    }

    /// Undated series on consecutive days from 2000-01-01.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
        let dates = (0..values.len()).map(|i| start + chrono::Days::new(i as u64)).collect();
        Self::new(dates, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn parse_date(s: &str, row: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT)
        .map_err(|e| Error::Parse { row, message: format!("bad date {s:?}: {e}") })
}

/// Parses `date,col1,...,colK`. Returns header names, dates and rows.
fn read_dated_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<NaiveDate>, Vec<Vec<f64>>)> {
    let mut rd = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Parse { row: 1, message: "need a date column and at least one value column".into() });
    }
    let names = header[1..].to_vec();
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let date = parse_date(&rec[0], row)?;
        if let Some(prev) = seen.insert(date, row) {
            return Err(Error::Parse { row, message: format!("duplicate date {date} (first at row {prev})") });
        }
        let values = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(j, cell)| {
                if cell.is_empty() {
                    return Err(Error::Parse { row, message: format!("missing value for {}", names[j]) });
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Parse { row, message: format!("non-numeric value {cell:?}") })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse { row, message: format!("non-finite value {cell:?}") })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        dates.push(date);
        rows.push(values);
    }
    Ok((names, dates, rows))
}

/// Sorts rows by date (files need not be ordered).
fn sort_by_date(dates: &mut Vec<NaiveDate>, rows: &mut Vec<Vec<f64>>) {
    let mut idx: Vec<usize> = (0..dates.len()).collect();
    idx.sort_by_key(|&i| dates[i]);
    *dates = idx.iter().map(|&i| dates[i]).collect();
    *rows = idx.iter().map(|&i| rows[i].clone()).collect();
}

pub fn read_returns_csv<R: Read>(r: R) -> Result<ReturnPanel> {
    let (assets, mut dates, mut rows) = read_dated_table(r)?;
    if rows.len() < 2 {
        return Err(Error::Parse { row: rows.len() + 1, message: "need at least 2 observations".into() });
    }
    sort_by_date(&mut dates, &mut rows);
    let returns = ReturnsMatrix::from_observations(&rows)?;
    ReturnPanel::new(dates, assets, returns)
}

pub fn load_returns_csv(path: &Path) -> Result<ReturnPanel> {
    read_returns_csv(std::fs::File::open(path)?)
}

pub fn write_returns_csv<W: Write>(panel: &ReturnPanel, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["date".to_string()];
    header.extend(panel.assets.iter().cloned());
    wr.write_record(&header).map_err(csv_err)?;
    let y = panel.returns.data();
    for (t, d) in panel.dates.iter().enumerate() {
        let mut rec = vec![d.format(DATE_FORMAT).to_string()];
        rec.extend(y.column(t).iter().map(|v| format!("{v:e}")));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_returns_csv(panel: &ReturnPanel, path: &Path) -> Result<()> {
    write_returns_csv(panel, std::fs::File::create(path)?)
}

pub fn read_factors_csv<R: Read>(r: R) -> Result<FactorPanel> {
    let (names, mut dates, mut rows) = read_dated_table(r)?;
    sort_by_date(&mut dates, &mut rows);
    let k = names.len();
    let factors = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
    Ok(FactorPanel { dates, names, factors })
}

pub fn load_factors_csv(path: &Path) -> Result<FactorPanel> {
    read_factors_csv(std::fs::File::open(path)?)
}

// ---------------------------------------------------------------------------
// Targets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    EqualWeight,
    EqualCorrelation,
    FamaFrench,
}

impl std::str::FromStr for TargetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal_weight" | "ew" => Ok(Self::EqualWeight),
            "equal_correlation" | "ec" => Ok(Self::EqualCorrelation),
            "fama_french" | "ff" => Ok(Self::FamaFrench),
            other => Err(Error::InvalidInput(format!("unknown target {other:?}"))),
        }
    }
}

pub fn target_equal_weight(p: usize) -> Result<PortfolioWeights<f64>> {
    Ok(PortfolioWeights::equal(p)?.with_provenance(Provenance::Target))
}

fn normalized_target(w: DVector<f64>) -> Result<PortfolioWeights<f64>> {
    let d = w.sum();
    if !(d.abs() > 0.0) || !d.is_finite() {
        return Err(Error::DegenerateDenominator);
    }
    PortfolioWeights::new(w / d, Provenance::Target)
}

/// GMV weights of the equicorrelation covariance built from `s`.
pub fn target_equal_correlation(s: &SymmetricMatrix<f64>) -> Result<PortfolioWeights<f64>> {
    let p = s.dim();
    let m = s.data();
    let sd: Vec<f64> = (0..p).map(|i| m[(i, i)]).map(f64::sqrt).collect();
    if let Some(i) = (0..p).find(|&i| !(m[(i, i)] > 0.0)) {
        return Err(Error::InvalidInput(format!("asset {i} has non-positive variance")));
    }
    if p == 1 {
        return target_equal_weight(1);
    }
    let mut sum = 0.0;
    for i in 0..p {
        for j in 0..i {
            sum += m[(i, j)] / (sd[i] * sd[j]);
        }
    }
    let r = sum / (p * (p - 1) / 2) as f64;
    let lower = -1.0 / (p - 1) as f64;
    if !(r > lower && r < 1.0) {
        return Err(Error::InvalidInput(format!(
            "average correlation {r} outside ({lower}, 1): equicorrelation matrix not positive definite"
        )));
    }
    // Sigma_ec^{-1} 1 = D^{-1} R^{-1} D^{-1} 1 with the closed-form R^{-1}.
    let v = DVector::from_iterator(p, sd.iter().map(|s| 1.0 / s));
    let k = r / (1.0 + (p - 1) as f64 * r);
    let total = v.sum();
    let w = DVector::from_iterator(p, (0..p).map(|i| (v[i] - k * total) / (1.0 - r) / sd[i]));
    normalized_target(w)
}

/// Fitted factor covariance pieces: `B` (`p x k`), `Sigma_f`, residual variances.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub loadings: DMatrix<f64>,
    pub factor_cov: DMatrix<f64>,
    pub residual_var: DVector<f64>,
}

impl FactorFit {
    pub fn covariance(&self) -> DMatrix<f64> {
        let b = &self.loadings;
        b * &self.factor_cov * b.transpose() + DMatrix::from_diagonal(&self.residual_var)
    }
}

/// Time-series regressions with intercept of every asset on the factors.
/// `y` is `p x n`, `f` is `n x k`; moments use divisor `n`.
pub fn fit_factor_model(y: &ReturnsMatrix<f64>, f: &DMatrix<f64>) -> Result<FactorFit> {
    let (p, n) = (y.p(), y.n());
    let k = f.ncols();
    if f.nrows() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: f.nrows() });
    }
    if n <= k + 1 {
        return Err(Error::InsufficientObservations(n));
    }
    let nf = n as f64;
    let fbar = f.row_mean();
    let mut fc = f.clone();
    for mut row in fc.row_iter_mut() {
        row -= &fbar;
    }
    let ybar = mean_of_columns(y.data());
    let mut yc = y.data().clone();
    for mut col in yc.column_iter_mut() {
        col -= &ybar;
    }
    let factor_cov = fc.tr_mul(&fc) / nf;
    let chol = factor_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateFactorFit("factor covariance is singular".into()))?;
    let scale = factor_cov.diagonal().amax().max(f64::MIN_POSITIVE);
    if chol.l().diagonal().iter().any(|d| d * d <= 1e-12 * scale) {
        return Err(Error::DegenerateFactorFit("factor covariance is singular".into()));
    }
    // Slopes: (Fc'Fc)^{-1} Fc'Yc', one column per asset.
    let cross = fc.tr_mul(&yc.transpose()) / nf;
    let loadings = chol.solve(&cross).transpose();
    let fitted = &fc * loadings.transpose();
    let resid = yc.transpose() - fitted;
    let mut residual_var = DVector::zeros(p);
    for i in 0..p {
        let v = resid.column(i).norm_squared() / nf;
        let total = yc.row(i).norm_squared() / nf;
        if !(v > 1e-12 * total) {
            return Err(Error::DegenerateFactorFit(format!("asset {i} has zero residual variance")));
        }
        residual_var[i] = v;
    }
    Ok(FactorFit { loadings, factor_cov, residual_var })
}

/// GMV weights of the factor-model covariance, inverted with Woodbury.
pub fn target_fama_french(y: &ReturnsMatrix<f64>, f: &DMatrix<f64>) -> Result<PortfolioWeights<f64>> {
    let fit = fit_factor_model(y, f)?;
    let d_inv = fit.residual_var.map(|v| 1.0 / v);
    let b = &fit.loadings;
    // Sigma^{-1} 1 = D^{-1} 1 - D^{-1} B (Sigma_f^{-1} + B'D^{-1}B)^{-1} B'D^{-1} 1
    let mut db = b.clone();
    for (i, mut row) in db.row_iter_mut().enumerate() {
        row *= d_inv[i];
    }
    let sf_inv = fit
        .factor_cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFactorFit("factor covariance is singular".into()))?;
    let inner = sf_inv + b.tr_mul(&db);
    let inner = inner
        .cholesky()
        .ok_or_else(|| Error::DegenerateFactorFit("Woodbury core not positive definite".into()))?;
    let rhs = db.tr_mul(&DVector::from_element(b.nrows(), 1.0));
    let w = &d_inv - &db * inner.solve(&rhs);
    normalized_target(w)
}

// ---------------------------------------------------------------------------
// Performance measures

/// Sample quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Mean after dropping `trim / 2` of the observations from each tail.
pub fn trimmed_mean(values: &[f64], trim: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = ((v.len() as f64 * trim / 2.0) + 1e-9).floor() as usize;
    let kept = &v[cut.min(v.len())..v.len().saturating_sub(cut)];
    if kept.is_empty() {
        return crate::simulate::median(&v);
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Measures of one realized series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeasures {
    pub ce: f64,
    /// `None` for a zero-variance series.
    pub sr: Option<f64>,
    pub var95: f64,
    pub var99: f64,
    pub es95: f64,
    pub es99: f64,
}

pub const MIN_SERIES_LEN: usize = 20;

fn tail(sorted: &[f64], level: f64) -> (f64, f64) {
    let var = quantile_sorted(sorted, 1.0 - level);
    let below: Vec<f64> = sorted.iter().copied().take_while(|&x| x <= var).collect();
    // The smallest observation is always at or below the interpolated quantile.
    let es = below.iter().sum::<f64>() / below.len() as f64;
    (var, es)
}

/// CE (`mean - gamma/2 var`), SR, and lower-tail VaR/ES as return levels.
/// Moments use divisor `n`.
pub fn series_measures(r: &ReturnSeries, gamma: f64) -> Result<SeriesMeasures> {
    if r.len() < MIN_SERIES_LEN {
        return Err(Error::InvalidInput(format!(
            "performance measures need at least {MIN_SERIES_LEN} observations, got {}",
            r.len()
        )));
    }
    let n = r.len() as f64;
    let m = r.values.iter().sum::<f64>() / n;
    let var = r.values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let sd = var.sqrt();
    let sr = if sd > 1e-14 * m.abs().max(f64::MIN_POSITIVE) { Some(m / sd) } else { None };
    let mut sorted = r.values.clone();
    sorted.sort_by(f64::total_cmp);
    let (var95, es95) = tail(&sorted, 0.95);
    let (var99, es99) = tail(&sorted, 0.99);
    Ok(SeriesMeasures { ce: m - 0.5 * gamma * var, sr, var95, var99, es95, es99 })
}

/// Aggregate measures over one or more portfolios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub ce_mean: f64,
    pub ce_median: f64,
    pub sr_mean: f64,
    pub sr_median: f64,
    pub var95: f64,
    pub var99: f64,
    pub es95: f64,
    pub es99: f64,
    pub trim_fraction: f64,
    pub portfolios: usize,
}

/// Trimmed means and medians of CE and SR; plain means of VaR and ES.
pub fn aggregate_measures(measures: &[SeriesMeasures], trim: f64) -> Result<PerformanceReport> {
    if measures.is_empty() {
        return Err(Error::InvalidInput("no series to aggregate".into()));
    }
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::InvalidInput(format!("trim fraction must lie in [0, 1), got {trim}")));
    }
    let ce: Vec<f64> = measures.iter().map(|m| m.ce).collect();
    let sr: Vec<f64> = measures
        .iter()
        .map(|m| m.sr.ok_or(Error::ZeroVariance("Sharpe ratio undefined")))
        .collect::<Result<_>>()?;
    let avg = |f: fn(&SeriesMeasures) -> f64| measures.iter().map(f).sum::<f64>() / measures.len() as f64;
    Ok(PerformanceReport {
        ce_mean: trimmed_mean(&ce, trim),
        ce_median: crate::simulate::median(&ce),
        sr_mean: trimmed_mean(&sr, trim),
        sr_median: crate::simulate::median(&sr),
        var95: avg(|m| m.var95),
        var99: avg(|m| m.var99),
        es95: avg(|m| m.es95),
        es99: avg(|m| m.es99),
        trim_fraction: trim,
        portfolios: measures.len(),
    })
}

pub fn performance_measures(r: &ReturnSeries, gamma: f64, trim: f64) -> Result<PerformanceReport> {
    aggregate_measures(&[series_measures(r, gamma)?], trim)
}

/// Paired t statistic with a two-sided 5% normal-approximation flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t_stat: f64,
    pub significant: bool,
}

pub const Z_975: f64 = 1.959963984540054;

pub fn paired_comparison(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    if a.len() < 10 {
        return Err(Error::InvalidInput(format!("paired test needs at least 10 pairs, got {}", a.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    let scale = d.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if var <= (1e-15 * scale).powi(2) {
        if scale == 0.0 {
            return Ok(PairedTest { n: d.len(), mean_diff: 0.0, t_stat: 0.0, significant: false });
        }
        return Err(Error::ZeroVariance("paired differences have zero variance"));
    }
    let t = m / (var / n).sqrt();
    Ok(PairedTest { n: d.len(), mean_diff: m, t_stat: t, significant: t.abs() > Z_975 })
}

// ---------------------------------------------------------------------------
// Rolling backtest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Traditional,
    BonaFide,
    Target,
}

pub const STRATEGIES: [Strategy; 3] = [Strategy::Traditional, Strategy::BonaFide, Strategy::Target];

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Traditional => "traditional",
            Strategy::BonaFide => "bona_fide",
            Strategy::Target => "target",
        }
    }
}

fn default_trim() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    1.0
}

fn default_eval_days() -> usize {
    200
}

/// Random asset subsets, each backtested separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub subset_size: usize,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSpec {
    /// Estimation window length; derived from `c` when absent.
    #[serde(default)]
    pub window: Option<usize>,
    /// Target concentration `p / window`.
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default = "default_eval_days")]
    pub eval_days: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub mode: Calibration,
    pub target: TargetKind,
    #[serde(default = "default_trim")]
    pub trim: f64,
    #[serde(default)]
    pub resampling: Option<ResamplingConfig>,
}

impl BacktestSpec {
    pub fn new(window: usize, eval_days: usize, mode: Calibration, target: TargetKind) -> Self {
        Self {
            window: Some(window),
            c: None,
            eval_days,
            gamma: 1.0,
            mode,
            target,
            trim: default_trim(),
            resampling: None,
        }
    }

    pub fn window_for(&self, p: usize) -> Result<usize> {
        match (self.window, self.c) {
            (Some(w), _) => Ok(w),
            (None, Some(c)) if c > 0.0 => Ok(((p as f64 / c).round() as usize).max(2)),
            _ => Err(Error::InvalidInput("backtest needs a window or a positive c".into())),
        }
    }
}

/// Weights held on one evaluation day, kept in memory only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DayWeights {
    pub traditional: Option<DVector<f64>>,
    pub bona_fide: Option<DVector<f64>>,
    pub target: Option<DVector<f64>>,
}

/// One evaluation day; `None` marks a gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub traditional: Option<f64>,
    pub bona_fide: Option<f64>,
    pub target: Option<f64>,
    pub alpha: Option<f64>,
    pub c_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub weights: DayWeights,
}

impl DayRecord {
    pub fn value(&self, s: Strategy) -> Option<f64> {
        match s {
            Strategy::Traditional => self.traditional,
            Strategy::BonaFide => self.bona_fide,
            Strategy::Target => self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestRun {
    pub window: usize,
    pub records: Vec<DayRecord>,
}

impl BacktestRun {
    /// Realized returns of one strategy with gap days dropped.
    pub fn series(&self, s: Strategy) -> Result<ReturnSeries> {
        let (dates, values): (Vec<_>, Vec<_>) =
            self.records.iter().filter_map(|r| r.value(s).map(|v| (r.date, v))).unzip();
        ReturnSeries::new(dates, values)
    }

    pub fn gaps(&self, s: Strategy) -> usize {
        self.records.iter().filter(|r| r.value(s).is_none()).count()
    }
}

fn target_for(
    kind: TargetKind,
    window: &ReturnsMatrix<f64>,
    s: &SymmetricMatrix<f64>,
    factors: Option<&DMatrix<f64>>,
) -> Result<PortfolioWeights<f64>> {
    match kind {
        TargetKind::EqualWeight => target_equal_weight(window.p()),
        TargetKind::EqualCorrelation => target_equal_correlation(s),
        TargetKind::FamaFrench => target_fama_french(
            window,
            factors.ok_or_else(|| Error::InvalidInput("fama_french target needs a factor file".into()))?,
        ),
    }
}

/// Daily re-estimation on the window ending the day before each of the last
/// `eval_days` observations. Estimator failures become gaps.
pub fn rolling_backtest(
    panel: &ReturnPanel,
    factors: Option<&FactorPanel>,
    spec: &BacktestSpec,
) -> Result<BacktestRun> {
    let p = panel.returns.p();
    let n = panel.returns.n();
    let window = spec.window_for(p)?;
    if window < 2 || spec.eval_days == 0 {
        return Err(Error::InvalidInput("window must be >= 2 and eval_days >= 1".into()));
    }
    if window + spec.eval_days > n {
        return Err(Error::InvalidInput(format!(
            "window {window} + eval_days {} exceeds {n} observations: evaluation would overlap estimation",
            spec.eval_days
        )));
    }
    if !(spec.gamma > 0.0) {
        return Err(Error::InvalidInput("gamma must be positive".into()));
    }
    if spec.target == TargetKind::FamaFrench && factors.is_none() {
        return Err(Error::InvalidInput("fama_french target needs a factor file".into()));
    }
    let mode = CalibrationMode::new(spec.mode, spec.gamma)?;
    let factor_rows = factors.map(|f| f.aligned(&panel.dates)).transpose()?;
    let first = n - spec.eval_days;
    let records = (first..n)
        .into_par_iter()
        .map(|t| {
            let y_win = panel.returns.window(t - window, t)?;
            let f_win = factor_rows.as_ref().map(|f| f.rows(t - window, window).into_owned());
            let y_t = panel.returns.data().column(t).into_owned();
            let mut rec = DayRecord {
                date: panel.dates[t],
                traditional: None,
                bona_fide: None,
                target: None,
                alpha: None,
                c_hat: p as f64 / window as f64,
                error: None,
                weights: DayWeights::default(),
            };
            let mut note = |e: Error| {
                if rec_error_is_empty(&rec.error) {
                    rec.error = Some(e.name().to_string());
                }
            };
            let est = sample_estimates(&y_win);
            let est = match est {
                Ok(e) => e,
                Err(e) => {
                    note(e);
                    return Ok(rec);
                }
            };
            match est.traditional_weights(spec.gamma) {
                Ok(w) => {
                    rec.traditional = Some(w.weights().dot(&y_t));
                    rec.weights.traditional = Some(w.into_inner());
                }
                Err(e) => note(e),
            }
            match target_for(spec.target, &y_win, &est.s, f_win.as_ref()) {
                Ok(b) => {
                    rec.target = Some(b.weights().dot(&y_t));
                    match bona_fide_fit(&est, &b, &mode) {
                        Ok(fit) => {
                            rec.alpha = Some(fit.alpha);
                            rec.bona_fide = Some(fit.bona_fide.weights().dot(&y_t));
                            rec.weights.bona_fide = Some(fit.bona_fide.into_inner());
                        }
                        Err(e) => note(e),
                    }
                    rec.weights.target = Some(b.into_inner());
                }
                Err(e) => note(e),
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BacktestRun { window, records })
}

fn rec_error_is_empty(e: &Option<String>) -> bool {
    e.is_none()
}

/// Full result of a configured backtest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub spec: BacktestSpec,
    pub p: usize,
    pub window: usize,
    pub c: f64,
    pub portfolios: usize,
    pub performance: Vec<StrategyReport>,
    /// Bona-fide against each competitor, on per-portfolio CE.
    pub paired_ce: Vec<PairedRow>,
    /// Bona-fide against each competitor, on per-portfolio SR.
    pub paired_sr: Vec<PairedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub gaps: usize,
    /// Set when the report could not be computed.
    pub error: Option<String>,
    pub report: Option<PerformanceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub against: Strategy,
    pub result: Option<PairedTest>,
    pub error: Option<String>,
}

/// Backtests the full panel, or `resampling.count` random subsets of it,
/// and aggregates the per-portfolio measures. Returns the report and the
/// per-day runs (one per portfolio).
pub fn run_backtest(
    panel: &ReturnPanel,
    factors: Option<&FactorPanel>,
    spec: &BacktestSpec,
) -> Result<(BacktestReport, Vec<BacktestRun>)> {
    let p_full = panel.returns.p();
    let runs: Vec<BacktestRun> = match spec.resampling {
        None => vec![rolling_backtest(panel, factors, spec)?],
        Some(rs) => {
            if rs.subset_size == 0 || rs.subset_size > p_full || rs.count == 0 {
                return Err(Error::InvalidInput(format!(
                    "resampling needs 1 <= subset_size <= {p_full} and count >= 1"
                )));
            }
            (0..rs.count)
                .into_par_iter()
                .map(|k| {
                    let mut rng = rng_for(rs.seed, k as u64);
                    let mut idx = rand::seq::index::sample(&mut rng, p_full, rs.subset_size).into_vec();
                    idx.sort_unstable();
                    rolling_backtest(&panel.select_assets(&idx)?, factors, spec)
                })
                .collect::<Result<_>>()?
        }
    };
    let p = spec.resampling.map_or(p_full, |r| r.subset_size);
    let window = runs[0].window;
    let mut per_strategy: HashMap<Strategy, Result<Vec<SeriesMeasures>>> = HashMap::new();
    let mut performance = Vec::new();
    for s in STRATEGIES {
        let measures: Result<Vec<SeriesMeasures>> = runs
            .iter()
            .map(|r| series_measures(&r.series(s)?, spec.gamma))
            .collect();
        let gaps = runs.iter().map(|r| r.gaps(s)).sum();
        let aggregated = match &measures {
            Ok(m) => aggregate_measures(m, spec.trim).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        let (report, error) = match aggregated {
            Ok(rep) => (Some(rep), None),
            Err(e) => (None, Some(e)),
        };
        performance.push(StrategyReport { strategy: s, gaps, error, report });
        per_strategy.insert(s, measures);
    }
    let paired = |f: fn(&SeriesMeasures) -> Option<f64>| -> Vec<PairedRow> {
        [Strategy::Traditional, Strategy::Target]
            .into_iter()
            .map(|other| {
                let res = (|| -> Result<PairedTest> {
                    let pick = |s: Strategy| -> Result<Vec<f64>> {
                        match &per_strategy[&s] {
                            Ok(m) => m
                                .iter()
                                .map(|x| f(x).ok_or(Error::ZeroVariance("Sharpe ratio undefined")))
                                .collect(),
                            Err(e) => Err(Error::InvalidInput(e.to_string())),
                        }
                    };
                    paired_comparison(&pick(Strategy::BonaFide)?, &pick(other)?)
                })();
                match res {
                    Ok(t) => PairedRow { against: other, result: Some(t), error: None },
                    Err(e) => PairedRow { against: other, result: None, error: Some(e.to_string()) },
                }
            })
            .collect()
    };
    let paired_ce = paired(|m| Some(m.ce));
    let paired_sr = paired(|m| m.sr);
    let report = BacktestReport {
        spec: spec.clone(),
        p,
        window,
        c: p as f64 / window as f64,
        portfolios: runs.len(),
        performance,
        paired_ce,
        paired_sr,
    };
    Ok((report, runs))
}

/// Flat per-day CSV: `portfolio,date,traditional,bona_fide,target,alpha`.
pub fn write_daily_csv<W: Write>(runs: &[BacktestRun], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["portfolio", "date", "traditional", "bona_fide", "target", "alpha"])
        .map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for (k, run) in runs.iter().enumerate() {
        for r in &run.records {
            wr.write_record([
                k.to_string(),
                r.date.format(DATE_FORMAT).to_string(),
                cell(r.traditional),
                cell(r.bona_fide),
                cell(r.target),
                cell(r.alpha),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

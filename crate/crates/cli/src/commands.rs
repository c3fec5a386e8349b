use crate::output::{metadata, read_config, resolve, to_json, write_atomic};
use crate::{Common, Failure};
use clap::Args;
use hdshrink::backtest::{
    load_factors_csv, load_returns_csv, run_backtest, target_equal_correlation,
    target_equal_weight, target_fama_french, write_daily_csv, BacktestSpec, ReturnPanel, TargetKind,
};
use hdshrink::shrinkage::{bona_fide_fit, sample_estimates};
use hdshrink::simulate::{
    default_c_grid, run_loss_experiment, verify_rmt_limits, ExperimentSpec, Innovation, Lemma,
    Probes, RmtSpec, RmtTolerances, Rotation,
};
use hdshrink::{Calibration, CalibrationMode, PortfolioWeights};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn flag_or<T: Clone>(flag: &Option<T>, file: Option<T>) -> Option<T> {
    flag.clone().or(file)
}

fn required<T>(v: Option<T>, what: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Config(format!("missing {what}")))
}

fn out_dir(common: &Common) -> Option<&Path> {
    common.out.as_deref()
}

// ---------------------------------------------------------------------------
// weights

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Returns CSV (`date,asset1,...`).
    #[arg(long)]
    pub returns: Option<PathBuf>,
    /// Factor CSV for the Fama-French target.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    /// equal_weight, equal_correlation or fama_french.
    #[arg(long)]
    pub target: Option<TargetKind>,
    /// mean_variance, min_variance or sharpe_ratio.
    #[arg(long)]
    pub mode: Option<Calibration>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fixed calibration parameter, overriding the mode.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsConfig {
    returns: Option<PathBuf>,
    factors: Option<PathBuf>,
    target: Option<TargetKind>,
    mode: Option<Calibration>,
    gamma: Option<f64>,
    beta: Option<f64>,
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(
    common: &Common,
) -> Result<(T, PathBuf), Failure> {
    match &common.config {
        Some(p) => read_config(p),
        None => Ok((T::default(), PathBuf::new())),
    }
}

pub fn weights(common: &Common, a: &WeightsArgs) -> Result<(), Failure> {
    let (file, base): (WeightsConfig, _) = load_or_default(common)?;
    let cfg = WeightsConfig {
        returns: a.returns.clone().or_else(|| file.returns.map(|p| resolve(&base, &p))),
        factors: a.factors.clone().or_else(|| file.factors.map(|p| resolve(&base, &p))),
        target: flag_or(&a.target, file.target).or(Some(TargetKind::EqualWeight)),
        mode: flag_or(&a.mode, file.mode).or(Some(Calibration::MeanVariance)),
        gamma: flag_or(&a.gamma, file.gamma).or(Some(1.0)),
        beta: flag_or(&a.beta, file.beta),
    };
    let panel = load_returns_csv(&required(cfg.returns.clone(), "returns file")?)?;
    let y = &panel.returns;
    let est = sample_estimates(y)?;
    let target_kind = cfg.target.unwrap_or(TargetKind::EqualWeight);
    let target: PortfolioWeights<f64> = match target_kind {
        TargetKind::EqualWeight => target_equal_weight(y.p())?,
        TargetKind::EqualCorrelation => target_equal_correlation(&est.s)?,
        TargetKind::FamaFrench => {
            let path = cfg
                .factors
                .clone()
                .ok_or_else(|| Failure::Config("fama_french target needs a factor file".into()))?;
            let f = load_factors_csv(&path)?.aligned(&panel.dates)?;
            target_fama_french(y, &f)?
        }
    };
    let mut mode = CalibrationMode::new(cfg.mode.unwrap_or_default(), cfg.gamma.unwrap_or(1.0))?;
    if let Some(b) = cfg.beta {
        mode = mode.with_beta(b)?;
    }
    let fit = bona_fide_fit(&est, &target, &mode)?;
    let vec = |w: &PortfolioWeights<f64>| w.weights().iter().copied().collect::<Vec<f64>>();
    let result = serde_json::json!({
        "metadata": metadata("weights", &cfg, common.seed),
        "assets": panel.assets,
        "p": est.p,
        "n": est.n,
        "c_hat": est.c_hat,
        "regime": est.regime,
        "inverse": est.s_inv.kind(),
        "beta": fit.beta,
        "alpha": fit.alpha,
        "frontier": fit.frontier,
        "target_stats": fit.target_stats,
        "target": target_kind,
        "weights": {
            "traditional": vec(&fit.traditional),
            "bona_fide": vec(&fit.bona_fide),
            "target": vec(&target),
        },
    });
    let bytes = to_json(&result);
    match out_dir(common) {
        Some(dir) => write_atomic(&dir.join("weights.json"), &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Concentration grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub c: Option<Vec<f64>>,
    /// Asset counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p: Option<Vec<usize>>,
    #[arg(long)]
    pub condition_index: Option<f64>,
    /// Calibration modes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Calibration>>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Student t degrees of freedom (Gaussian when absent).
    #[arg(long)]
    pub student_t: Option<f64>,
}

pub fn simulate(common: &Common, a: &SimulateArgs) -> Result<(), Failure> {
    let mut spec: ExperimentSpec = match &common.config {
        Some(p) => read_config(p)?.0,
        None => ExperimentSpec {
            c_grid: default_c_grid(),
            p_grid: vec![100],
            condition_index: 1000.0,
            lambda_min: 0.1,
            rotation: Rotation::RandomOrthogonal,
            mu_range: (-0.3, 0.3),
            innovation: Innovation::Gaussian,
            modes: vec![Calibration::MeanVariance],
            gamma: 1.0,
            replications: 100,
            seed: 0,
        },
    };
    if let Some(c) = &a.c {
        spec.c_grid = c.clone();
    }
    if let Some(p) = &a.p {
        spec.p_grid = p.clone();
    }
    if let Some(ci) = a.condition_index {
        spec.condition_index = ci;
    }
    if let Some(m) = &a.modes {
        spec.modes = m.clone();
    }
    if let Some(r) = a.replications {
        spec.replications = r;
    }
    if let Some(g) = a.gamma {
        spec.gamma = g;
    }
    if let Some(df) = a.student_t {
        spec.innovation = Innovation::StudentT { df };
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let table = run_loss_experiment(&spec)?;
    let dir = out_dir(common).unwrap_or(Path::new("."));
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_atomic(&dir.join("experiment.csv"), &csv)?;
    let mut meta = metadata("simulate", &spec, Some(spec.seed));
    meta["cells"] = serde_json::to_value(&table.cells).expect("serializable");
    write_atomic(&dir.join("experiment.json"), &to_json(&meta))?;
    let flagged = table.cells.iter().filter(|c| c.error.is_some()).count();
    if flagged > 0 {
        log::warn!("{flagged} cells flagged; see experiment.json");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyConfig {
    p: Option<usize>,
    n: Option<usize>,
    seeds: Option<usize>,
    seed: Option<u64>,
    #[serde(default)]
    innovation: Option<Innovation>,
    #[serde(default)]
    lemmas: Option<Vec<Lemma>>,
    #[serde(default)]
    tolerances: Option<RmtTolerances>,
}

pub fn verify(common: &Common, a: &VerifyArgs) -> Result<(), Failure> {
    let (file, _): (VerifyConfig, _) = load_or_default(common)?;
    let cfg = VerifyConfig {
        p: flag_or(&a.p, file.p).or(Some(500)),
        n: flag_or(&a.n, file.n).or(Some(1000)),
        seeds: flag_or(&a.seeds, file.seeds).or(Some(20)),
        seed: flag_or(&common.seed, file.seed).or(Some(0)),
        innovation: file.innovation.or(Some(Innovation::Gaussian)),
        lemmas: file.lemmas,
        tolerances: file.tolerances.or(Some(RmtTolerances::default())),
    };
    let (p, n) = (cfg.p.unwrap_or(500), cfg.n.unwrap_or(1000));
    let first = cfg.seed.unwrap_or(0);
    let count = cfg.seeds.unwrap_or(20) as u64;
    let spec = RmtSpec {
        p,
        n,
        seeds: (first..first + count).collect(),
        innovation: cfg.innovation.unwrap_or_default(),
        lemmas: cfg.lemmas.clone(),
        tolerances: cfg.tolerances.unwrap_or_default(),
    };
    let rows = verify_rmt_limits(&spec, &Probes::standard(p))?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let result = serde_json::json!({
        "metadata": metadata("verify", &cfg, cfg.seed),
        "p": p,
        "n": n,
        "passed": failed == 0,
        "rows": rows,
    });
    let bytes = to_json(&result);
    match out_dir(common) {
        Some(dir) => write_atomic(&dir.join("verify.json"), &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    for r in rows.iter().filter(|r| !r.pass) {
        log::warn!("lemma {} {}: {} vs limit {} (gap {})", r.lemma, r.quantity, r.empirical, r.limit, r.gap);
    }
    if failed > 0 {
        return Err(Failure::Verification(failed));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// backtest

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub returns: Option<PathBuf>,
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub eval_days: Option<usize>,
    #[arg(long)]
    pub target: Option<TargetKind>,
    #[arg(long)]
    pub mode: Option<Calibration>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BacktestConfig {
    returns: Option<PathBuf>,
    #[serde(default)]
    factors: Option<PathBuf>,
    #[serde(flatten)]
    spec: BacktestSpec,
}

pub fn backtest(common: &Common, a: &BacktestArgs) -> Result<(), Failure> {
    let (mut cfg, base): (BacktestConfig, PathBuf) = match &common.config {
        Some(p) => read_config(p)?,
        None => (
            BacktestConfig {
                returns: None,
                factors: None,
                spec: BacktestSpec::new(250, 200, Calibration::MeanVariance, TargetKind::EqualWeight),
            },
            PathBuf::new(),
        ),
    };
    cfg.returns = a.returns.clone().or_else(|| cfg.returns.map(|p| resolve(&base, &p)));
    cfg.factors = a.factors.clone().or_else(|| cfg.factors.map(|p| resolve(&base, &p)));
    if let Some(w) = a.window {
        cfg.spec.window = Some(w);
    }
    if let Some(d) = a.eval_days {
        cfg.spec.eval_days = d;
    }
    if let Some(t) = a.target {
        cfg.spec.target = t;
    }
    if let Some(m) = a.mode {
        cfg.spec.mode = m;
    }
    if let Some(g) = a.gamma {
        cfg.spec.gamma = g;
    }
    if let (Some(s), Some(r)) = (common.seed, cfg.spec.resampling.as_mut()) {
        r.seed = s;
    }
    if cfg.spec.target == TargetKind::FamaFrench && cfg.factors.is_none() {
        return Err(Failure::Config("fama_french target needs a factor file".into()));
    }
    let panel: ReturnPanel = load_returns_csv(&required(cfg.returns.clone(), "returns file")?)?;
    let factors = cfg.factors.as_ref().map(|p| load_factors_csv(p)).transpose()?;
    let (report, runs) = run_backtest(&panel, factors.as_ref(), &cfg.spec)?;
    let dir = out_dir(common).unwrap_or(Path::new("."));
    let seed = cfg.spec.resampling.map(|r| r.seed);
    let result = serde_json::json!({
        "metadata": metadata("backtest", &cfg, seed),
        "report": report,
    });
    write_atomic(&dir.join("backtest.json"), &to_json(&result))?;
    let mut daily = Vec::new();
    write_daily_csv(&runs, &mut daily)?;
    write_atomic(&dir.join("backtest_daily.csv"), &daily)?;
    for s in &report.performance {
        if s.gaps > 0 {
            log::warn!("{}: {} evaluation days without a portfolio", s.strategy.name(), s.gaps);
        }
    }
    Ok(())
}

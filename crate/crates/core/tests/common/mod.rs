#![allow(dead_code)]

use hdshrink::backtest::{load_factors_csv, load_returns_csv, run_backtest, BacktestReport, BacktestRun, BacktestSpec};
use serde_json::Value;
use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Runs the bundled synthetic backtest configuration.
pub fn fixture_backtest() -> (BacktestReport, Vec<BacktestRun>) {
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(fixture("backtest_config.json")).unwrap()).unwrap();
    let spec: BacktestSpec = serde_json::from_value(cfg.clone()).unwrap();
    let panel = load_returns_csv(&fixture(cfg["returns"].as_str().unwrap())).unwrap();
    let factors = load_factors_csv(&fixture(cfg["factors"].as_str().unwrap())).unwrap();
    run_backtest(&panel, Some(&factors), &spec).unwrap()
}

/// Structural equality with a relative tolerance on numbers.
pub fn json_close(a: &Value, b: &Value, rel: f64, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-300) {
                Ok(())
            } else {
                Err(format!("{path}: {x} != {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                return Err(format!("{path}: length {} != {}", x.len(), y.len()));
            }
            x.iter().zip(y).enumerate().try_for_each(|(i, (u, v))| json_close(u, v, rel, &format!("{path}[{i}]")))
        }
        (Value::Object(x), Value::Object(y)) => {
            let mut kx: Vec<_> = x.keys().collect();
            let mut ky: Vec<_> = y.keys().collect();
            kx.sort();
            ky.sort();
            if kx != ky {
                return Err(format!("{path}: keys {kx:?} != {ky:?}"));
            }
            x.iter().try_for_each(|(k, u)| json_close(u, &y[k], rel, &format!("{path}.{k}")))
        }
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} != {b}")),
    }
}

/// Compares the fixture report with the committed golden file. Set
/// `HDSHRINK_BLESS=1` to rewrite the golden file instead.
pub fn check_golden(report: &BacktestReport) -> Result<(), String> {
    let path = fixture("backtest_golden.json");
    let got = serde_json::to_value(report).unwrap();
    if std::env::var_os("HDSHRINK_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    json_close(&got, &want, 1e-9, "$")
}

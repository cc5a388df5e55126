//! Browser bindings for the simulator: LOF scoring, quorum arithmetic and a
//! small end-to-end run.

use baffle_sim::defense::{max_tolerated_malicious, quorum_threshold, QuorumParams};
use baffle_sim::harness::{comm_overhead, run_experiment, ConfigBuilder, RoundRow};
use baffle_sim::lof::{lof_score, VPoint};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// Parses `x y` pairs separated by newlines or semicolons.
fn parse_points(text: &str) -> Result<Vec<VPoint>, String> {
    text.split(['\n', ';'])
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let coords = l
                .split([' ', ',', '\t'])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
                .collect::<Result<Vec<_>, _>>()?;
            if coords.len() == 2 {
                Ok(VPoint(coords))
            } else {
                Err(format!("expected two coordinates in {l:?}"))
            }
        })
        .collect()
}

/// LOF of the query `(x, y)` against the reference points.
#[wasm_bindgen]
pub fn lof(points: &str, x: f64, y: f64, k: usize) -> Result<f64, JsValue> {
    lof_inner(points, x, y, k).map_err(|e| JsValue::from_str(&e))
}

fn lof_inner(points: &str, x: f64, y: f64, k: usize) -> Result<f64, String> {
    let refs = parse_points(points)?;
    lof_score(&VPoint(vec![x, y]), &refs, k).map_err(msg)
}

/// LOF sampled on a `size` by `size` grid spanning `[lo, hi]` in both axes,
/// row-major with `y` increasing down the rows.
#[wasm_bindgen]
pub fn lof_field(points: &str, k: usize, lo: f64, hi: f64, size: usize) -> Result<Vec<f64>, JsValue> {
    lof_field_inner(points, k, lo, hi, size).map_err(|e| JsValue::from_str(&e))
}

fn lof_field_inner(points: &str, k: usize, lo: f64, hi: f64, size: usize) -> Result<Vec<f64>, String> {
    let refs = parse_points(points)?;
    let step = (hi - lo) / (size.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let q = VPoint(vec![lo + col as f64 * step, lo + row as f64 * step]);
            out.push(lof_score(&q, &refs, k).map_err(msg)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct QuorumSummary {
    max_malicious: usize,
    quorum: usize,
    bytes_per_validator: f64,
}

/// Tolerated malicious validators, the resulting quorum and the download
/// size per validator, as JSON.
#[wasm_bindgen]
pub fn quorum_summary(
    n: usize,
    rho: f64,
    model_bytes: f64,
    lookback: usize,
    compression: f64,
) -> Result<String, JsValue> {
    js(quorum_inner(n, rho, model_bytes, lookback, compression))
}

fn quorum_inner(n: usize, rho: f64, model_bytes: f64, lookback: usize, compression: f64) -> Result<String, String> {
    let max_malicious = max_tolerated_malicious(n, rho).map_err(msg)?;
    let quorum = quorum_threshold(&QuorumParams { n, n_malicious: max_malicious, rho }).map_err(msg)?;
    let bytes_per_validator = comm_overhead(model_bytes, lookback, compression).map_err(msg)?;
    serde_json::to_string(&QuorumSummary { max_malicious, quorum, bytes_per_validator }).map_err(msg)
}

#[derive(Serialize)]
struct SimulationSummary {
    fp_rate: Option<f64>,
    fn_rate: Option<f64>,
    defense_start_round: usize,
    rounds: Vec<RoundRow>,
}

/// Runs one repetition of a reduced experiment with the given TOML overrides
/// and returns the per-round table as JSON.
#[wasm_bindgen]
pub fn simulate(overrides: &str) -> Result<String, JsValue> {
    js(simulate_inner(overrides))
}

fn simulate_inner(overrides: &str) -> Result<String, String> {
    let mut builder = ConfigBuilder::new();
    for kv in [
        "repetitions=1",
        "data.num_classes=5",
        "backdoor.source=1",
        "backdoor.target=3",
        "data.dim=10",
        "data.samples_per_class=60",
        "fl.total_clients=30",
        "fl.contributors_per_round=6",
        "defense.validators_per_round=6",
        "defense.quorum=3",
        "defense.lookback=10",
        "scenario.plateau_window=10",
        "scenario.max_warmup_rounds=200",
    ] {
        builder = builder.set(kv).map_err(msg)?;
    }
    let config = builder.merge_toml(overrides).and_then(ConfigBuilder::build).map_err(msg)?;
    let report = run_experiment(&config).map_err(msg)?;
    let rep = &report.repetitions[0];
    serde_json::to_string(&SimulationSummary {
        fp_rate: rep.fp_rate,
        fn_rate: rep.fn_rate,
        defense_start_round: config.scenario.defense_start_round,
        rounds: rep.rounds.iter().map(RoundRow::from).collect(),
    })
    .map_err(msg)
}

//! WebAssembly bindings behind the static demo page in `www/`.
//!
//! Every binding returns a JSON string. The plain functions carry the
//! logic and are usable (and tested) natively; the `js_*` wrappers only
//! convert errors for JavaScript.

use serde::Serialize;
use wasm_bindgen::prelude::*;
use xtrial::sim::monte_carlo::run_monte_carlo;
use xtrial::sim::{analytic_truth, generate, ScenarioSpec};
use xtrial::{run_tmle, wald_test, TmleOptions, Truncation};

/// Replicate counts above this are refused; the page runs on one thread.
pub const MAX_BROWSER_REPLICATES: usize = 500;

#[derive(Serialize)]
struct ReplicateEstimate {
    reference_trials: String,
    vaccine: i64,
    truth: f64,
    psi: f64,
    se: f64,
    ci: (f64, f64),
    covered: bool,
}

#[derive(Serialize)]
struct ReplicateSummary {
    scenario: String,
    replicate: u32,
    units: usize,
    measured: usize,
    estimates: Vec<ReplicateEstimate>,
}

fn scenario(preset: &str, seed: u32) -> Result<ScenarioSpec, String> {
    let mut s = ScenarioSpec::preset(preset).map_err(|e| e.to_string())?;
    s.base_seed = u64::from(seed);
    Ok(s)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

/// Simulates one replicate of a preset and estimates each of its
/// estimands, alongside the analytic truth.
pub fn simulate_replicate(preset: &str, seed: u32, replicate: u32) -> Result<String, String> {
    let s = scenario(preset, seed)?;
    let ds = generate(&s, u64::from(replicate));
    let mut estimates = Vec::new();
    for e in &s.estimands {
        let truth = analytic_truth(&s, &e.reference_trials, e.vaccine).map_err(|e| e.to_string())?;
        let r = run_tmle(&ds, &e.spec(&s, Truncation::default()), &TmleOptions::default())
            .map_err(|e| e.to_string())?;
        estimates.push(ReplicateEstimate {
            reference_trials: e.label(),
            vaccine: e.vaccine.0,
            truth,
            psi: r.psi,
            se: r.se,
            ci: r.ci,
            covered: r.ci.0 <= truth && truth <= r.ci.1,
        });
    }
    to_json(&ReplicateSummary {
        scenario: s.name.clone(),
        replicate,
        units: ds.n(),
        measured: ds.units.iter().filter(|u| u.delta).count(),
        estimates,
    })
}

#[derive(Serialize)]
struct StudyRow {
    reference_trials: String,
    vaccine: i64,
    truth: f64,
    bias: f64,
    variance: f64,
    ci_coverage: f64,
    ci_width: f64,
    estimates: Vec<f64>,
}

/// A small Monte Carlo study of one estimand of a preset: summary metrics
/// plus every replicate's estimate for a histogram.
pub fn monte_carlo_study(preset: &str, estimand: usize, replicates: usize, seed: u32) -> Result<String, String> {
    if replicates == 0 || replicates > MAX_BROWSER_REPLICATES {
        return Err(format!("replicates must be between 1 and {MAX_BROWSER_REPLICATES}"));
    }
    let s = scenario(preset, seed)?;
    let e = s
        .estimands
        .get(estimand)
        .cloned()
        .ok_or_else(|| format!("estimand index {estimand} out of range (0..{})", s.estimands.len()))?;
    let table = run_monte_carlo(
        &s,
        std::slice::from_ref(&e),
        replicates,
        &TmleOptions::default(),
        Truncation::default(),
    )
    .map_err(|e| e.to_string())?;
    let m = &table.rows[0];
    to_json(&StudyRow {
        reference_trials: m.reference_trials.clone(),
        vaccine: m.vaccine.0,
        truth: m.truth,
        bias: m.bias,
        variance: m.variance,
        ci_coverage: m.ci_coverage,
        ci_width: m.ci_width,
        estimates: table.records.iter().filter_map(|r| r.psi).collect(),
    })
}

#[derive(Serialize)]
struct WaldSummary {
    estimate: f64,
    se: f64,
    z: f64,
    p_value: f64,
    ci: (f64, f64),
    degenerate: bool,
}

/// Wald test of `estimate` against `null` with a 95% interval.
pub fn wald(estimate: f64, se: f64, null: f64) -> Result<String, String> {
    let w = wald_test(estimate, se, null).map_err(|e| e.to_string())?;
    to_json(&WaldSummary {
        estimate,
        se,
        z: w.z,
        p_value: w.p,
        ci: (estimate - 1.96 * se, estimate + 1.96 * se),
        degenerate: w.degenerate,
    })
}

/// Names of the built-in scenarios.
pub fn presets() -> String {
    serde_json::to_string(&xtrial::sim::preset_names()).unwrap_or_default()
}

#[wasm_bindgen(js_name = simulateReplicate)]
pub fn js_simulate_replicate(preset: &str, seed: u32, replicate: u32) -> Result<String, JsValue> {
    simulate_replicate(preset, seed, replicate).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = monteCarloStudy)]
pub fn js_monte_carlo_study(preset: &str, estimand: usize, replicates: usize, seed: u32) -> Result<String, JsValue> {
    monte_carlo_study(preset, estimand, replicates, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = waldTest)]
pub fn js_wald(estimate: f64, se: f64, null: f64) -> Result<String, JsValue> {
    wald(estimate, se, null).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = presetNames)]
pub fn js_presets() -> String {
    presets()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicate_summary_lists_every_estimand() {
        let v: serde_json::Value =
            serde_json::from_str(&simulate_replicate("scenario1", 11, 0).unwrap()).unwrap();
        assert_eq!(v["estimates"].as_array().unwrap().len(), 4);
        assert_eq!(v["units"], 700);
        for e in v["estimates"].as_array().unwrap() {
            assert!(e["se"].as_f64().unwrap() > 0.0);
        }
    }

    #[test]
    fn study_returns_one_estimate_per_replicate() {
        let v: serde_json::Value =
            serde_json::from_str(&monte_carlo_study("scenario1", 2, 5, 3).unwrap()).unwrap();
        assert_eq!(v["estimates"].as_array().unwrap().len(), 5);
        assert!(monte_carlo_study("scenario1", 9, 5, 3).is_err());
        assert!(monte_carlo_study("scenario1", 0, 0, 3).is_err());
    }

    #[test]
    fn wald_matches_reference_point() {
        let v: serde_json::Value = serde_json::from_str(&wald(1.96, 1.0, 0.0).unwrap()).unwrap();
        assert!((v["p_value"].as_f64().unwrap() - 0.05).abs() < 1e-4);
        assert!(wald(0.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn unknown_preset_is_reported() {
        assert!(simulate_replicate("nope", 1, 0).unwrap_err().contains("scenario1"));
        assert!(presets().contains("scenario3"));
    }
}

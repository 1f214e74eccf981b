use std::time::Instant;

use serde::{Deserialize, Serialize};
use xtrial::sim::monte_carlo::{run_monte_carlo, EstimandMetrics, ReplicateRecord};
use xtrial::sim::ScenarioSpec;
use xtrial::TmleOptions;

use crate::report::render_metrics;
use crate::{create_dir, write_file, worker_threads, CliError, CliResult, RunConfig};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Stored results of one `simulate` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: RunConfig,
    pub scenario: ScenarioSpec,
    pub replicates: usize,
    pub rows: Vec<EstimandMetrics>,
    pub records: Vec<ReplicateRecord>,
}

/// Provenance and timing of a run; the only output that varies between
/// identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub threads: usize,
    pub replicates: usize,
    pub elapsed_seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub xtrial: String,
    pub xtrial_cli: String,
}

fn load_scenario(cfg: &RunConfig) -> CliResult<ScenarioSpec> {
    match (&cfg.preset, &cfg.scenario) {
        (Some(name), None) => ScenarioSpec::preset(name).map_err(|e| CliError::input(e.to_string())),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
            ScenarioSpec::from_json(&text).map_err(|e| {
                CliError::input(format!("invalid scenario {}: {e}", path.display()))
            })
        }
        _ => Err(CliError::input("simulate needs exactly one of --preset or --scenario")),
    }
}

/// Runs the scenario's Monte Carlo study and writes the metrics table, its
/// JSON record and a run manifest. Returns the rendered metrics table.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<String> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::input("simulate requires --out"))?;
    let seed = cfg
        .seed
        .ok_or_else(|| CliError::input("simulate requires --seed"))?;
    let mut scenario = load_scenario(cfg)?;
    scenario.base_seed = seed;
    let replicates = cfg.replicates.unwrap_or(scenario.replicates);
    if scenario.estimands.is_empty() {
        return Err(CliError::input("scenario lists no estimands"));
    }
    let opts = TmleOptions {
        gdelta: cfg.gdelta,
        ..TmleOptions::default()
    };
    let config_hash = cfg.hash()?;

    let start = Instant::now();
    let table = run_monte_carlo(&scenario, &scenario.estimands, replicates, &opts, cfg.truncation)?;
    let elapsed = start.elapsed().as_secs_f64();

    create_dir(out)?;
    let seed_text = seed.to_string();
    let mut csv = Vec::new();
    table.write_csv(&mut csv, &[("config_hash", &config_hash), ("seed", &seed_text)])?;
    write_file(&out.join(METRICS_CSV), &csv)?;

    let doc = SimulationDocument {
        config_hash: config_hash.clone(),
        seed,
        version: xtrial::VERSION.to_string(),
        config: RunConfig {
            out: None,
            ..cfg.clone()
        },
        scenario,
        replicates,
        rows: table.rows,
        records: table.records,
    };
    let json = serde_json::to_vec_pretty(&doc).map_err(|e| CliError::input(e.to_string()))?;
    write_file(&out.join(METRICS_JSON), &json)?;

    let manifest = RunManifest {
        config_hash,
        seed,
        versions: Versions {
            xtrial: xtrial::VERSION.to_string(),
            xtrial_cli: env!("CARGO_PKG_VERSION").to_string(),
        },
        threads: worker_threads(),
        replicates,
        elapsed_seconds: elapsed,
        files: vec![METRICS_CSV.into(), METRICS_JSON.into()],
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::input(e.to_string()))?;
    write_file(&out.join(MANIFEST_JSON), &json)?;
    Ok(render_metrics(&doc))
}

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xtrial::nuisance::resolve_sampling;
use xtrial::tmle::Diagnostics;
use xtrial::{
    contrast_difference, contrast_geomean_ratio, estimate_unadjusted, load_stacked_csv, run_tmle,
    validate, ColumnSchema, ContrastKind, ContrastResult, EstimandSpec, EstimateResult, Estimator,
    OutcomeScale, RegistryOverride, StackedDataset, TmleOptions, TrialId, VaccineId,
};

use crate::report::render_estimates;
use crate::{create_dir, write_file, CliError, CliResult, ContrastPair, ResponseSpec, RunConfig};

pub const ESTIMATES_JSON: &str = "estimates.json";
pub const ESTIMATES_CSV: &str = "estimates.csv";
pub const CONTRASTS_CSV: &str = "contrasts.csv";
pub const REPORT_MD: &str = "report.md";

/// One arm-level estimate, with the analysis-scale values and the values
/// shown in tables (geometric means for log10 responses).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub estimator: Estimator,
    pub vaccine: VaccineId,
    pub evaluation_trials: Vec<TrialId>,
    pub psi: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub display: f64,
    pub display_ci: (f64, f64),
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub estimator: Estimator,
    pub vaccine_a: VaccineId,
    pub vaccine_b: VaccineId,
    pub kind: ContrastKind,
    pub estimate: f64,
    pub ci: (f64, f64),
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBlock {
    pub response: ResponseSpec,
    pub estimates: Vec<EstimateRow>,
    pub contrasts: Vec<ContrastRow>,
}

/// Stored results of one `estimate` run. The stored configuration omits
/// the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateDocument {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub config: RunConfig,
    pub reference_trials: Vec<TrialId>,
    pub contrasts: Vec<ContrastPair>,
    pub blocks: Vec<ResponseBlock>,
}

fn display_values(scale: OutcomeScale, psi: f64, ci: (f64, f64)) -> (f64, (f64, f64)) {
    match scale {
        OutcomeScale::Log10 => (10f64.powf(psi), (10f64.powf(ci.0), 10f64.powf(ci.1))),
        _ => (psi, ci),
    }
}

fn estimate_row(r: &EstimateResult, trials: &BTreeSet<TrialId>) -> EstimateRow {
    let (display, display_ci) = display_values(r.scale, r.psi, r.ci);
    EstimateRow {
        estimator: r.estimator,
        vaccine: r.vaccine,
        evaluation_trials: trials.iter().copied().collect(),
        psi: r.psi,
        se: r.se,
        ci: r.ci,
        display,
        display_ci,
        diagnostics: (r.estimator == Estimator::Tmle).then(|| r.diagnostics.clone()),
    }
}

fn contrast_row(c: &ContrastResult, pair: ContrastPair) -> ContrastRow {
    ContrastRow {
        estimator: c.components.0.estimator,
        vaccine_a: pair.a,
        vaccine_b: pair.b,
        kind: c.kind,
        estimate: c.estimate,
        ci: c.ci,
        se: c.se,
        z: c.z,
        p_value: c.p_value,
        degenerate: c.degenerate,
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

/// Contrast pairs requested, or the first vaccine against each other one.
fn resolve_contrasts(cfg: &RunConfig) -> CliResult<Vec<ContrastPair>> {
    let pairs = if cfg.contrasts.is_empty() {
        cfg.vaccines
            .iter()
            .skip(1)
            .map(|&b| ContrastPair {
                a: cfg.vaccines[0],
                b,
            })
            .collect()
    } else {
        cfg.contrasts.clone()
    };
    for p in &pairs {
        for v in [p.a, p.b] {
            if !cfg.vaccines.contains(&v) {
                return Err(CliError::validation(format!(
                    "contrast {}:{} uses vaccine {v}, which is not among the requested vaccines ({})",
                    p.a,
                    p.b,
                    join(&cfg.vaccines)
                )));
            }
        }
    }
    Ok(pairs)
}

fn load(cfg: &RunConfig, response: &ResponseSpec) -> CliResult<StackedDataset> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::input("estimate requires --input"))?;
    if !input.is_file() {
        return Err(CliError::input(format!("input file {} not found", input.display())));
    }
    let mut covariates = cfg.ws.clone();
    for c in &cfg.wdelta {
        if !covariates.contains(c) {
            covariates.push(c.clone());
        }
    }
    let schema = ColumnSchema {
        covariates: Some(covariates),
        ..ColumnSchema::with_response(&response.column)
    };
    let mut ds = load_stacked_csv(input, &schema)?;
    if let Some(path) = &cfg.registry {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
        ds.apply_registry_override(&RegistryOverride::from_json(&text)?)?;
    }
    Ok(ds)
}

fn check_labels(cfg: &RunConfig, ds: &StackedDataset) -> CliResult<()> {
    if cfg.vaccines.is_empty() {
        return Err(CliError::validation("no vaccine requested"));
    }
    let vaccines = ds.vaccines();
    for v in &cfg.vaccines {
        if !vaccines.contains(v) {
            return Err(CliError::validation(format!(
                "vaccine {v} does not occur in the data; valid labels: {}",
                join(&vaccines)
            )));
        }
    }
    let trials = ds.trials();
    for t in &cfg.reference_trials {
        if !trials.contains(t) {
            return Err(CliError::validation(format!(
                "referent trial {t} does not occur in the data; valid labels: {}",
                join(&trials)
            )));
        }
    }
    if cfg.reference_trials.is_empty() {
        return Err(CliError::validation("no referent trial requested"));
    }
    Ok(())
}

fn contrast(
    a: &EstimateResult,
    b: &EstimateResult,
    scale: OutcomeScale,
) -> xtrial::Result<ContrastResult> {
    match scale {
        OutcomeScale::Log10 => contrast_geomean_ratio(a, b),
        _ => contrast_difference(a, b),
    }
}

fn estimate_block(
    cfg: &RunConfig,
    response: &ResponseSpec,
    pairs: &[ContrastPair],
    warnings: &mut Vec<String>,
) -> CliResult<ResponseBlock> {
    let ds = load(cfg, response)?;
    check_labels(cfg, &ds)?;
    let opts = TmleOptions {
        gdelta: cfg.gdelta,
        ..TmleOptions::default()
    };
    let mut tmle = Vec::new();
    let mut unadj = Vec::new();
    let mut rows = Vec::new();
    for &v in &cfg.vaccines {
        let spec = EstimandSpec::for_dataset(&ds, v, cfg.reference_trials.iter().copied())
            .with_ws(&cfg.ws)
            .with_wdelta(&cfg.wdelta)
            .with_scale(response.scale)
            .with_truncation(cfg.truncation);
        let report = validate(&ds, &spec);
        if !report.is_ok() {
            return Err(CliError::validation(format!(
                "response `{}`, vaccine {v}:\n{}",
                response.column,
                report.render()
            )));
        }
        for w in &report.warnings {
            let w = format!("vaccine {v}: {w}");
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        let g_delta = resolve_sampling(&ds, &spec, cfg.gdelta)?;
        let u = estimate_unadjusted(&ds, v, &spec.evaluation_trials, response.scale, &g_delta)?;
        let t = run_tmle(&ds, &spec, &opts).map_err(|e| {
            let mut err = CliError::from(e);
            err.message = format!("response `{}`, vaccine {v}: {}", response.column, err.message);
            err
        })?;
        rows.push(estimate_row(&u, &spec.evaluation_trials));
        rows.push(estimate_row(&t, &spec.evaluation_trials));
        unadj.push(u);
        tmle.push(t);
    }
    let idx = |v: VaccineId| cfg.vaccines.iter().position(|&x| x == v).unwrap();
    let mut contrasts = Vec::new();
    for &p in pairs {
        let (ia, ib) = (idx(p.a), idx(p.b));
        for set in [&unadj, &tmle] {
            let c = contrast(&set[ia], &set[ib], response.scale)?;
            contrasts.push(contrast_row(&c, p));
        }
    }
    Ok(ResponseBlock {
        response: response.clone(),
        estimates: rows,
        contrasts,
    })
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn write_estimates_csv(doc: &EstimateDocument, path: &Path) -> CliResult<()> {
    let seed = doc.seed.map(|s| s.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::input(e.to_string());
    w.write_record([
        "response", "column", "scale", "estimator", "vaccine", "evaluation_trials",
        "reference_trials", "psi", "se", "ci_lo", "ci_hi", "display", "display_lo",
        "display_hi", "config_hash", "seed",
    ])
    .map_err(err)?;
    let refs = join(&doc.reference_trials);
    for b in &doc.blocks {
        for r in &b.estimates {
            let scale = serde_json::to_value(b.response.scale).unwrap();
            let estimator = serde_json::to_value(r.estimator).unwrap();
            w.write_record([
                b.response.label.clone(),
                b.response.column.clone(),
                scale.as_str().unwrap_or_default().to_string(),
                estimator.as_str().unwrap_or_default().to_string(),
                r.vaccine.to_string(),
                join(&r.evaluation_trials),
                if r.estimator == Estimator::Tmle { refs.clone() } else { String::new() },
                f(r.psi),
                f(r.se),
                f(r.ci.0),
                f(r.ci.1),
                f(r.display),
                f(r.display_ci.0),
                f(r.display_ci.1),
                doc.config_hash.clone(),
                seed.clone(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::input(e.to_string()))?;
    write_file(path, &bytes)
}

fn write_contrasts_csv(doc: &EstimateDocument, path: &Path) -> CliResult<()> {
    let seed = doc.seed.map(|s| s.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::input(e.to_string());
    w.write_record([
        "response", "column", "scale", "estimator", "vaccine_a", "vaccine_b", "kind",
        "estimate", "ci_lo", "ci_hi", "se", "z", "p_value", "degenerate", "config_hash", "seed",
    ])
    .map_err(err)?;
    for b in &doc.blocks {
        for c in &b.contrasts {
            let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
            w.write_record([
                b.response.label.clone(),
                b.response.column.clone(),
                name(serde_json::to_value(b.response.scale).unwrap()),
                name(serde_json::to_value(c.estimator).unwrap()),
                c.vaccine_a.to_string(),
                c.vaccine_b.to_string(),
                name(serde_json::to_value(c.kind).unwrap()),
                f(c.estimate),
                f(c.ci.0),
                f(c.ci.1),
                f(c.se),
                f(c.z),
                f(c.p_value),
                c.degenerate.to_string(),
                doc.config_hash.clone(),
                seed.clone(),
            ])
            .map_err(err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::input(e.to_string()))?;
    write_file(path, &bytes)
}

/// Runs every requested (response, vaccine) estimate and contrast, writes
/// the result files to the output directory and returns the rendered
/// comparison table.
pub fn cmd_estimate(cfg: &RunConfig) -> CliResult<String> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::input("estimate requires --out"))?;
    if let Some(input) = &cfg.input {
        if !input.is_file() {
            return Err(CliError::input(format!("input file {} not found", input.display())));
        }
    }
    let pairs = resolve_contrasts(cfg)?;
    let mut warnings = Vec::new();
    let blocks = cfg
        .responses
        .iter()
        .map(|r| estimate_block(cfg, r, &pairs, &mut warnings))
        .collect::<CliResult<Vec<_>>>()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let doc = EstimateDocument {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        version: xtrial::VERSION.to_string(),
        config: RunConfig {
            out: None,
            ..cfg.clone()
        },
        reference_trials: cfg.reference_trials.clone(),
        contrasts: pairs,
        blocks,
    };
    create_dir(out)?;
    let json = serde_json::to_vec_pretty(&doc).map_err(|e| CliError::input(e.to_string()))?;
    write_file(&out.join(ESTIMATES_JSON), &json)?;
    write_estimates_csv(&doc, &out.join(ESTIMATES_CSV))?;
    write_contrasts_csv(&doc, &out.join(CONTRASTS_CSV))?;
    let report = render_estimates(&doc);
    write_file(&out.join(REPORT_MD), report.as_bytes())?;
    Ok(report)
}

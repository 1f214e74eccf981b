use std::fmt::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use xtrial::{Estimator, OutcomeScale, VaccineId};

use crate::estimate::{ContrastRow, EstimateDocument, EstimateRow, ResponseBlock, ESTIMATES_JSON};
use crate::simulate::{SimulationDocument, METRICS_JSON};
use crate::{CliError, CliResult, RunConfig};

/// Fixed-point with `digits` decimals and no negative zero.
fn fixed(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn interval(ci: (f64, f64)) -> String {
    format!("({}, {})", fixed(ci.0, 3), fixed(ci.1, 3))
}

fn p_value(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        fixed(p, 3)
    }
}

fn measure(scale: OutcomeScale) -> &'static str {
    match scale {
        OutcomeScale::Binary => "RR",
        OutcomeScale::Log10 => "GM",
        OutcomeScale::Identity => "Mean",
    }
}

fn estimator_tag(e: Estimator) -> &'static str {
    match e {
        Estimator::Unadjusted => "unadj",
        Estimator::Tmle => "TMLE",
    }
}

fn row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn find_estimate(b: &ResponseBlock, v: VaccineId, e: Estimator) -> Option<&EstimateRow> {
    b.estimates.iter().find(|r| r.vaccine == v && r.estimator == e)
}

fn find_contrast(b: &ResponseBlock, a: VaccineId, bv: VaccineId, e: Estimator) -> Option<&ContrastRow> {
    b.contrasts
        .iter()
        .find(|c| c.vaccine_a == a && c.vaccine_b == bv && c.estimator == e)
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

/// Comparison tables, one per contrast: for every response, a point
/// estimate row, a CI row and a p-value row per measure and estimator.
pub fn render_estimates(doc: &EstimateDocument) -> String {
    let mut s = String::new();
    s.push_str("# Standardized vaccine comparison\n\n");
    let _ = writeln!(s, "- Config hash: `{}`", doc.config_hash);
    let seed = doc.seed.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
    let _ = writeln!(s, "- Seed: {seed}");
    let _ = writeln!(s, "- Referent trials: {}", list(&doc.reference_trials));

    let mut labels: Vec<&str> = Vec::new();
    for b in &doc.blocks {
        if !labels.contains(&b.response.label.as_str()) {
            labels.push(&b.response.label);
        }
    }
    let trials_of = |v: VaccineId| {
        doc.blocks
            .iter()
            .flat_map(|b| b.estimates.iter())
            .find(|r| r.vaccine == v)
            .map(|r| list(&r.evaluation_trials))
            .unwrap_or_default()
    };

    for pair in &doc.contrasts {
        let _ = writeln!(s, "\n## Vaccine {} vs vaccine {}\n", pair.a, pair.b);
        s.push_str(&row(&[
            "Trial".into(),
            trials_of(pair.a),
            trials_of(pair.b),
            "Difference/Ratio".into(),
        ]));
        s.push_str("|---|---|---|---|\n");
        s.push_str(&row(&[
            "Vaccine".into(),
            pair.a.to_string(),
            pair.b.to_string(),
            "-".into(),
        ]));
        for label in &labels {
            s.push_str(&row(&[
                format!("**Response: {label}**"),
                String::new(),
                String::new(),
                String::new(),
            ]));
            for b in doc.blocks.iter().filter(|b| b.response.label == *label) {
                for e in [Estimator::Unadjusted, Estimator::Tmle] {
                    let (Some(ra), Some(rb), Some(c)) = (
                        find_estimate(b, pair.a, e),
                        find_estimate(b, pair.b, e),
                        find_contrast(b, pair.a, pair.b, e),
                    ) else {
                        continue;
                    };
                    s.push_str(&row(&[
                        format!("{} ({})", measure(b.response.scale), estimator_tag(e)),
                        fixed(ra.display, 3),
                        fixed(rb.display, 3),
                        fixed(c.estimate, 3),
                    ]));
                    s.push_str(&row(&[
                        "CI".into(),
                        interval(ra.display_ci),
                        interval(rb.display_ci),
                        interval(c.ci),
                    ]));
                    s.push_str(&row(&[
                        "p value".into(),
                        "--".into(),
                        "--".into(),
                        p_value(c.p_value),
                    ]));
                }
            }
        }
    }
    s
}

/// Simulation metrics in the column order of the simulation table.
pub fn render_metrics(doc: &SimulationDocument) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Simulation results: {}\n", doc.scenario.name);
    let _ = writeln!(s, "- Config hash: `{}`", doc.config_hash);
    let _ = writeln!(s, "- Seed: {}", doc.seed);
    let _ = writeln!(s, "- Replicates: {}\n", doc.replicates);
    s.push_str(&row(&[
        "Case".into(),
        "T_ref".into(),
        "Vaccine".into(),
        "Truth".into(),
        "Bias".into(),
        "Variance".into(),
        "MSE".into(),
        "CI coverage".into(),
        "CI width".into(),
        "Failed".into(),
    ]));
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &doc.rows {
        s.push_str(&row(&[
            r.scenario.clone(),
            r.reference_trials.clone(),
            r.vaccine.to_string(),
            fixed(r.truth, 2),
            fixed(r.bias, 4),
            fixed(r.variance, 4),
            fixed(r.mse, 4),
            fixed(r.ci_coverage, 3),
            fixed(r.ci_width, 4),
            r.failed.to_string(),
        ]));
    }
    s
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::input(format!("corrupt results file {}: {e}", path.display())))
}

/// Renders the tables stored in a results directory. Reads only.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<String> {
    let dir = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::input("report requires --input"))?;
    if !dir.is_dir() {
        return Err(CliError::input(format!("results directory {} not found", dir.display())));
    }
    let estimates: Option<EstimateDocument> = read_json(&dir.join(ESTIMATES_JSON))?;
    let metrics: Option<SimulationDocument> = read_json(&dir.join(METRICS_JSON))?;
    let mut parts = Vec::new();
    if let Some(doc) = &estimates {
        parts.push(render_estimates(doc));
    }
    if let Some(doc) = &metrics {
        parts.push(render_metrics(doc));
    }
    if parts.is_empty() {
        return Err(CliError::input(format!(
            "no results in {} (expected {ESTIMATES_JSON} or {METRICS_JSON})",
            dir.display()
        )));
    }
    Ok(parts.join("\n"))
}

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{TrialId, VaccineId};
use crate::error::{Error, Result};
use crate::estimand::{EstimandSpec, Truncation};
use crate::stats::{mean, sample_variance};
use crate::tmle::{run_tmle, TmleOptions};

use super::{analytic_truth, generate, ScenarioSpec, COVARIATES};

/// Runs above this fraction of failed replicates per estimand are rejected.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McEstimand {
    pub reference_trials: BTreeSet<TrialId>,
    pub vaccine: VaccineId,
}

impl McEstimand {
    /// W_S = (w1, w2); the vaccine is evaluated where it is the active arm.
    pub fn spec(&self, scenario: &ScenarioSpec, truncation: Truncation) -> EstimandSpec {
        EstimandSpec::new(
            self.vaccine,
            self.reference_trials.iter().copied(),
            scenario
                .trials
                .iter()
                .filter(|t| t.active_vaccine == self.vaccine)
                .map(|t| t.id),
        )
        .with_ws(&COVARIATES)
        .with_truncation(truncation)
    }

    pub fn label(&self) -> String {
        let ids: Vec<String> = self.reference_trials.iter().map(|t| t.to_string()).collect();
        format!("{{{}}}", ids.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub estimand: usize,
    pub psi: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Mean and standard deviation of the estimate's influence function.
    pub eif_moments: Option<(f64, f64)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandMetrics {
    pub scenario: String,
    pub reference_trials: String,
    pub vaccine: VaccineId,
    pub truth: f64,
    pub bias: f64,
    /// Sample variance of the estimates; zero when only one replicate
    /// succeeded.
    pub variance: f64,
    pub mse: f64,
    pub ci_coverage: f64,
    pub ci_width: f64,
    pub replicates: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<EstimandMetrics>,
    pub records: Vec<ReplicateRecord>,
}

impl MetricsTable {
    /// CSV in the simulation-table column order, followed by one constant
    /// column per `provenance` entry.
    pub fn write_csv<W: Write>(&self, writer: W, provenance: &[(&str, &str)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec![
            "case",
            "t_ref",
            "vaccine",
            "truth",
            "bias",
            "variance",
            "mse",
            "ci_coverage",
            "ci_width",
            "replicates",
            "failed",
        ];
        header.extend(provenance.iter().map(|p| p.0));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut row = vec![
                r.scenario.clone(),
                r.reference_trials.clone(),
                r.vaccine.to_string(),
                format!("{:.4}", r.truth),
                format!("{:.4}", r.bias),
                format!("{:.4}", r.variance),
                format!("{:.4}", r.mse),
                format!("{:.4}", r.ci_coverage),
                format!("{:.4}", r.ci_width),
                r.replicates.to_string(),
                r.failed.to_string(),
            ];
            row.extend(provenance.iter().map(|p| p.1.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<metrics>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Maps `f` over replicate indices `0..replicates`, returning results in
/// replicate order whether or not the work runs in parallel.
pub fn par_map_replicates<T, F>(replicates: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..replicates).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..replicates).map(f).collect()
    }
}

/// Generates `replicates` datasets, runs the TMLE for every estimand on
/// each, and summarizes against the analytic truth.
pub fn run_monte_carlo(
    scenario: &ScenarioSpec,
    estimands: &[McEstimand],
    replicates: usize,
    opts: &TmleOptions,
    truncation: Truncation,
) -> Result<MetricsTable> {
    if replicates == 0 {
        return Err(Error::Contract("at least one replicate is required".into()));
    }
    if estimands.is_empty() {
        return Err(Error::Contract("no estimands requested".into()));
    }
    let truths = estimands
        .iter()
        .map(|e| analytic_truth(scenario, &e.reference_trials, e.vaccine))
        .collect::<Result<Vec<_>>>()?;
    let specs: Vec<EstimandSpec> = estimands.iter().map(|e| e.spec(scenario, truncation)).collect();

    let per_rep: Vec<Vec<ReplicateRecord>> = par_map_replicates(replicates as u64, |r| {
        let ds = generate(scenario, r);
        specs
            .iter()
            .enumerate()
            .map(|(k, spec)| match run_tmle(&ds, spec, opts) {
                Ok(est) => ReplicateRecord {
                    replicate: r,
                    estimand: k,
                    psi: Some(est.psi),
                    se: Some(est.se),
                    ci: Some(est.ci),
                    eif_moments: Some((est.diagnostics.mean_eif, est.diagnostics.sd_eif)),
                    error: None,
                },
                Err(e) => ReplicateRecord {
                    replicate: r,
                    estimand: k,
                    psi: None,
                    se: None,
                    ci: None,
                    eif_moments: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    let records: Vec<ReplicateRecord> = per_rep.into_iter().flatten().collect();

    let mut rows = Vec::with_capacity(estimands.len());
    for (k, e) in estimands.iter().enumerate() {
        let truth = truths[k];
        let ok: Vec<&ReplicateRecord> = records
            .iter()
            .filter(|r| r.estimand == k && r.error.is_none())
            .collect();
        let failed = replicates - ok.len();
        if failed as f64 > MAX_FAILURE_RATE * replicates as f64 {
            let first = records
                .iter()
                .find(|r| r.estimand == k && r.error.is_some())
                .and_then(|r| r.error.clone())
                .unwrap_or_default();
            return Err(Error::Estimation(format!(
                "{failed} of {replicates} replicates failed for vaccine {} with referent {}; first error: {first}",
                e.vaccine,
                e.label()
            )));
        }
        if ok.is_empty() {
            return Err(Error::Estimation("every replicate failed".into()));
        }
        let psi: Vec<f64> = ok.iter().map(|r| r.psi.unwrap()).collect();
        let cis: Vec<(f64, f64)> = ok.iter().map(|r| r.ci.unwrap()).collect();
        let sq: Vec<f64> = psi.iter().map(|p| (p - truth) * (p - truth)).collect();
        let covered = cis.iter().filter(|c| c.0 <= truth && truth <= c.1).count();
        let widths: Vec<f64> = cis.iter().map(|c| c.1 - c.0).collect();
        rows.push(EstimandMetrics {
            scenario: scenario.name.clone(),
            reference_trials: e.label(),
            vaccine: e.vaccine,
            truth,
            bias: mean(&psi) - truth,
            variance: sample_variance(&psi),
            mse: mean(&sq),
            ci_coverage: covered as f64 / ok.len() as f64,
            ci_width: mean(&widths),
            replicates: ok.len(),
            failed,
        });
    }
    Ok(MetricsTable { rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_is_deterministic_and_consistent() {
        let s = ScenarioSpec::preset("scenario1").unwrap();
        let est = &s.estimands[2..3];
        let a = run_monte_carlo(&s, est, 6, &TmleOptions::default(), Truncation::default()).unwrap();
        let b = run_monte_carlo(&s, est, 6, &TmleOptions::default(), Truncation::default()).unwrap();
        assert_eq!(a, b);
        let r = &a.rows[0];
        let rr = r.replicates as f64;
        assert!((r.mse - (r.bias * r.bias + r.variance * (rr - 1.0) / rr)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.ci_coverage));
    }

    #[test]
    fn single_replicate_has_zero_variance() {
        let s = ScenarioSpec::preset("scenario1").unwrap();
        let t = run_monte_carlo(&s, &s.estimands[..1], 1, &TmleOptions::default(), Truncation::default()).unwrap();
        assert_eq!(t.rows[0].variance, 0.0);
        assert!((t.rows[0].mse - t.rows[0].bias.powi(2)).abs() < 1e-15);
    }
}

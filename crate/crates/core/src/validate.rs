//! Pre-estimation diagnostics: covariate availability, registry invariants,
//! positivity of vaccine assignment and of sampling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, Design, StackedDataset, TrialId};
use crate::estimand::EstimandSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateRole {
    Adjustment,
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityCheck {
    pub covariate: String,
    pub trial: TrialId,
    pub role: CovariateRole,
    pub pass: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityStratum {
    /// W_S values rendered as text, in W_S order.
    pub profile: Vec<String>,
    pub reference_units: usize,
    pub vaccine_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDiagnostic {
    pub trial: TrialId,
    pub design: Design,
    /// Range of known sampling probabilities; `None` when they must be
    /// estimated.
    pub min_known: Option<f64>,
    pub max_known: Option<f64>,
    pub sampled: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub covariate_availability: Vec<AvailabilityCheck>,
    pub positivity: Vec<PositivityStratum>,
    pub sampling: Vec<SamplingDiagnostic>,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.failures {
            out.push_str("FAIL: ");
            out.push_str(f);
            out.push('\n');
        }
        for w in &self.warnings {
            out.push_str("WARN: ");
            out.push_str(w);
            out.push('\n');
        }
        out
    }
}

/// Checks that `spec` can be estimated from `ds`. Never fails: every problem
/// is recorded in the report.
/// Real covariates with more distinct values than this are treated as
/// continuous when forming positivity strata.
pub const MAX_DISCRETE_LEVELS: usize = 10;

fn is_discrete(ds: &StackedDataset, i: usize) -> bool {
    match ds.covariates[i].kind {
        CovariateKind::Categorical { .. } => true,
        CovariateKind::Real => {
            let mut seen = BTreeSet::new();
            for u in &ds.units {
                if let Some(v) = &u.covariates[i] {
                    seen.insert(v.to_string());
                    if seen.len() > MAX_DISCRETE_LEVELS {
                        return false;
                    }
                }
            }
            true
        }
    }
}

pub fn validate(ds: &StackedDataset, spec: &EstimandSpec) -> ValidationReport {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();

    if spec.reference_trials.is_empty() {
        failures.push("referent trial set is empty".to_string());
    }
    if spec.evaluation_trials.is_empty() {
        failures.push(format!("no evaluation trials for vaccine {}", spec.vaccine));
    }
    for t in spec.reference_trials.iter().chain(&spec.evaluation_trials) {
        if !ds.registry.contains_key(t) {
            failures.push(format!("trial {t} is not present in the dataset"));
        }
    }
    let vaccines = ds.vaccines();
    if !vaccines.contains(&spec.vaccine) {
        let labels: Vec<String> = vaccines.iter().map(|v| v.to_string()).collect();
        failures.push(format!(
            "vaccine {} does not occur in the dataset (valid labels: {})",
            spec.vaccine,
            labels.join(", ")
        ));
    }

    // Registry invariants.
    for (t, info) in &ds.registry {
        if info.design == Design::AllSampled {
            let unsampled = ds
                .units
                .iter()
                .filter(|u| u.trial == *t && !u.delta)
                .count();
            if unsampled > 0 {
                failures.push(format!(
                    "trial {t} is registered all-sampled but has {unsampled} unit(s) with delta=0"
                ));
            }
        }
        for (ci, col) in ds.covariates.iter().enumerate() {
            if info.collected.contains(&col.name) {
                continue;
            }
            if ds
                .units
                .iter()
                .any(|u| u.trial == *t && u.covariates[ci].is_some())
            {
                failures.push(format!(
                    "covariate `{}` is registered uncollected in trial {t} but has values there",
                    col.name
                ));
            }
        }
    }

    // Availability of W_S over T_ref ∪ T_a and of W_Δ over T_a.
    let mut availability = Vec::new();
    let mut check = |cov: &str, t: TrialId, role: CovariateRole| {
        let Some(info) = ds.registry.get(&t) else {
            return;
        };
        let detail = match ds.covariate_index(cov) {
            None => Some("covariate not present in dataset".to_string()),
            Some(_) if !info.collected.contains(cov) => Some("not collected in trial".into()),
            Some(ci) => {
                let missing = ds
                    .units
                    .iter()
                    .filter(|u| u.trial == t && u.covariates[ci].is_none())
                    .count();
                (missing > 0).then(|| format!("{missing} unit(s) missing a value"))
            }
        };
        if let Some(d) = &detail {
            failures.push(format!("covariate `{cov}` unavailable in trial {t}: {d}"));
        }
        availability.push(AvailabilityCheck {
            covariate: cov.to_string(),
            trial: t,
            role,
            pass: detail.is_none(),
            detail,
        });
    };
    let adj_trials: Vec<TrialId> = spec
        .reference_trials
        .union(&spec.evaluation_trials)
        .copied()
        .collect();
    for cov in &spec.ws {
        for &t in &adj_trials {
            check(cov, t, CovariateRole::Adjustment);
        }
    }
    for cov in &spec.wdelta {
        for &t in &spec.evaluation_trials {
            check(cov, t, CovariateRole::Sampling);
        }
    }

    // Units of the target vaccine outside the declared evaluation trials are
    // not used as vaccine-a units.
    let stray = ds
        .units
        .iter()
        .filter(|u| u.arm == spec.vaccine && !spec.in_evaluation(u.trial))
        .count();
    if stray > 0 {
        warnings.push(format!(
            "{stray} unit(s) received vaccine {} outside its evaluation trials",
            spec.vaccine
        ));
    }
    if spec.reference_trials.is_disjoint(&spec.evaluation_trials) {
        warnings.push(
            "referent and evaluation trials are disjoint: g_A(a|W) is extrapolated to referent units and \
             is structurally zero outside the evaluation trials"
                .to_string(),
        );
    }
    let measured_a = ds
        .units
        .iter()
        .filter(|u| u.arm == spec.vaccine && spec.in_evaluation(u.trial) && u.delta)
        .count();
    if measured_a == 0 {
        failures.push(format!(
            "no measured immune responses for vaccine {} in its evaluation trials",
            spec.vaccine
        ));
    }

    // Positivity: profiles of the discrete W_S covariates seen among
    // referent units with no vaccine-a units. Continuous covariates are
    // left out because nearly every unit has its own value.
    let ws_idx: Vec<Option<usize>> = spec.ws.iter().map(|c| ds.covariate_index(c)).collect();
    let mut positivity = Vec::new();
    if ws_idx.iter().all(Option::is_some) {
        let ws_idx: Vec<usize> = ws_idx
            .into_iter()
            .flatten()
            .filter(|&i| is_discrete(ds, i))
            .collect();
        let profile = |u: &crate::data::ObservedUnit| -> Option<Vec<String>> {
            ws_idx
                .iter()
                .map(|&i| u.covariates[i].as_ref().map(|v| v.to_string()))
                .collect()
        };
        let mut strata: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
        for u in ds.units.iter().filter(|u| spec.in_reference(u.trial)) {
            if let Some(p) = profile(u) {
                strata.entry(p).or_default().0 += 1;
            }
        }
        for u in ds
            .units
            .iter()
            .filter(|u| u.arm == spec.vaccine && spec.in_evaluation(u.trial))
        {
            if let Some(p) = profile(u) {
                if let Some(e) = strata.get_mut(&p) {
                    e.1 += 1;
                }
            }
        }
        for (p, (r, a)) in strata {
            if a == 0 {
                warnings.push(format!(
                    "positivity: stratum ({}) has {r} referent unit(s) but no unit received vaccine {}",
                    p.join(", "),
                    spec.vaccine
                ));
            }
            positivity.push(PositivityStratum {
                profile: p,
                reference_units: r,
                vaccine_units: a,
            });
        }
    }

    // Sampling diagnostics for the evaluation trials.
    let mut sampling = Vec::new();
    for &t in &spec.evaluation_trials {
        let Some(info) = ds.registry.get(&t) else {
            continue;
        };
        let units: Vec<_> = ds.units.iter().filter(|u| u.trial == t).collect();
        let known: Vec<f64> = units.iter().filter_map(|u| u.weight_known).collect();
        let (min_known, max_known) = match info.design {
            Design::AllSampled if known.is_empty() => (Some(1.0), Some(1.0)),
            _ if known.len() == units.len() => (
                known.iter().copied().reduce(f64::min),
                known.iter().copied().reduce(f64::max),
            ),
            _ => (None, None),
        };
        if info.design == Design::AllSampled && known.iter().any(|&w| w < 1.0) {
            warnings.push(format!(
                "trial {t} is registered all-sampled but carries known sampling weights below 1; \
                 the known weights take precedence"
            ));
        }
        if info.design == Design::TwoPhase && !known.is_empty() && known.len() < units.len() {
            warnings.push(format!(
                "trial {t}: known sampling weights present on {} of {} units; the rest are estimated",
                known.len(),
                units.len()
            ));
        }
        if let Some(lo) = min_known {
            if lo < spec.truncation.lo {
                warnings.push(format!(
                    "trial {t}: known sampling probability {lo} is below the truncation bound {}",
                    spec.truncation.lo
                ));
            }
        }
        sampling.push(SamplingDiagnostic {
            trial: t,
            design: info.design,
            min_known,
            max_known,
            sampled: units.iter().filter(|u| u.delta).count(),
            total: units.len(),
        });
    }

    ValidationReport {
        covariate_availability: availability,
        positivity,
        sampling,
        failures,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_stacked_csv, ColumnSchema, RegistryOverride, VaccineId};

    fn ds(text: &str) -> StackedDataset {
        read_stacked_csv(text.as_bytes(), &ColumnSchema::default()).unwrap()
    }

    const TWO_TRIALS: &str = "\
trial,arm,delta,s,y,weight,W1,W2
1,1,1,1.0,0,,1,0
1,3,1,0.2,1,,0,1
1,1,1,2.0,0,,1,1
2,2,1,1.5,,,0,0
2,3,1,0.1,,,1,1
2,2,1,1.2,,,1,0
";

    #[test]
    fn all_pass_when_covariates_everywhere() {
        let d = ds(TWO_TRIALS);
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(1), TrialId(2)])
            .with_ws(&["W1", "W2"]);
        let r = validate(&d, &spec);
        assert!(r.is_ok(), "{}", r.render());
        assert_eq!(r.covariate_availability.len(), 4);
        assert!(r.covariate_availability.iter().all(|c| c.pass));
    }

    #[test]
    fn missing_covariate_in_one_trial_fails_that_pair() {
        let text = TWO_TRIALS.replace("\n2,2,1,1.5,,,0,0", "\n2,2,1,1.5,,,0,");
        let text = text.replace("2,3,1,0.1,,,1,1", "2,3,1,0.1,,,1,");
        let text = text.replace("2,2,1,1.2,,,1,0", "2,2,1,1.2,,,1,");
        let d = ds(&text);
        let spec =
            EstimandSpec::for_dataset(&d, VaccineId(2), [TrialId(1)]).with_ws(&["W1", "W2"]);
        let r = validate(&d, &spec);
        assert!(!r.is_ok());
        let failed: Vec<_> = r
            .covariate_availability
            .iter()
            .filter(|c| !c.pass)
            .map(|c| (c.covariate.as_str(), c.trial))
            .collect();
        assert_eq!(failed, vec![("W2", TrialId(2))]);
    }

    #[test]
    fn all_sampled_invariant_violation_detected() {
        let text = "trial,arm,delta,s,y,weight\n1,1,1,1.0,,\n1,1,0,,,\n1,3,1,0.3,,\n";
        let mut d = ds(text);
        assert_eq!(d.registry[&TrialId(1)].design, Design::TwoPhase);
        let ov = RegistryOverride::from_json(r#"{"trials":{"1":{"design":"all-sampled"}}}"#)
            .unwrap();
        d.apply_registry_override(&ov).unwrap();
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(1)]);
        let r = validate(&d, &spec);
        assert!(r.failures.iter().any(|f| f.contains("all-sampled")));
    }

    #[test]
    fn unknown_vaccine_lists_labels() {
        let d = ds(TWO_TRIALS);
        let spec = EstimandSpec::new(VaccineId(9), [TrialId(1)], [TrialId(1)]);
        let r = validate(&d, &spec);
        assert!(r
            .failures
            .iter()
            .any(|f| f.contains("valid labels: 1, 2, 3")));
    }

    #[test]
    fn validate_is_pure() {
        let d = ds(TWO_TRIALS);
        let before = d.clone();
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(2)]).with_ws(&["W1"]);
        assert_eq!(validate(&d, &spec), validate(&d, &spec));
        assert_eq!(d, before);
    }
}

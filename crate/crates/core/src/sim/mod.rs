//! Simulated stacked trials with two binary covariates, 1:1 randomization to
//! an active vaccine or a shared control, a normal immune response, a
//! binary clinical outcome and optional two-phase sampling of the response.

pub mod monte_carlo;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    CovValue, CovariateColumn, CovariateKind, Design, ObservedUnit, Outcome, StackedDataset,
    TrialId, VaccineId,
};
use crate::error::{contract, Error, Result};
use crate::glm::expit;
use crate::nuisance::KnownPropensities;
use crate::tmle::DiscreteDgp;

pub use monte_carlo::{
    par_map_replicates, run_monte_carlo, EstimandMetrics, McEstimand, MetricsTable,
    ReplicateRecord, MAX_FAILURE_RATE,
};

/// Sampling probability P(Δ=1 | Y=y, arm), indexed `[control, active]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingTable {
    pub y0: [f64; 2],
    pub y1: [f64; 2],
}

impl SamplingTable {
    pub const ALL: Self = Self {
        y0: [1.0, 1.0],
        y1: [1.0, 1.0],
    };

    pub fn prob(&self, y: bool, active: bool) -> f64 {
        let row = if y { &self.y1 } else { &self.y0 };
        row[active as usize]
    }

    pub fn all_sampled(&self) -> bool {
        self.y0.iter().chain(&self.y1).all(|&p| p == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub id: TrialId,
    pub active_vaccine: VaccineId,
    /// Units per arm; the trial enrolls twice this many.
    pub n_per_arm: usize,
    pub p_w1: f64,
    pub p_w2: f64,
    pub sampling: SamplingTable,
}

impl TrialSpec {
    pub fn size(&self) -> usize {
        2 * self.n_per_arm
    }
}

/// S ~ N(s_intercept + s_w1·W1 + s_w2·W2 + s_active·active, s_sd²) and
/// P(Y=1) = expit(y_intercept + y_active·active + y_w1·W1 + y_w2·W2 + y_s·S).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub s_intercept: f64,
    pub s_w1: f64,
    pub s_w2: f64,
    pub s_active: f64,
    pub s_sd: f64,
    pub y_intercept: f64,
    pub y_active: f64,
    pub y_w1: f64,
    pub y_w2: f64,
    pub y_s: f64,
}

impl OutcomeModel {
    pub fn s_mean(&self, w1: f64, w2: f64, active: bool) -> f64 {
        self.s_intercept + self.s_w1 * w1 + self.s_w2 * w2 + self.s_active * active as u8 as f64
    }

    pub fn p_y(&self, w1: f64, w2: f64, active: bool, s: f64) -> f64 {
        expit(
            self.y_intercept
                + self.y_active * active as u8 as f64
                + self.y_w1 * w1
                + self.y_w2 * w2
                + self.y_s * s,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub control_label: VaccineId,
    pub trials: Vec<TrialSpec>,
    pub outcome: OutcomeModel,
    #[serde(default)]
    pub estimands: Vec<McEstimand>,
    pub replicates: usize,
    pub base_seed: u64,
}

pub const COVARIATES: [&str; 2] = ["w1", "w2"];

const PRESETS: [(&str, &str); 3] = [
    ("scenario1", include_str!("../../presets/scenario1.json")),
    ("scenario2", include_str!("../../presets/scenario2.json")),
    ("scenario3", include_str!("../../presets/scenario3.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

impl ScenarioSpec {
    /// One of the built-in scenarios by name.
    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .map(|p| p.1)
            .ok_or_else(|| {
                Error::Schema(format!(
                    "unknown preset `{name}` (available: {})",
                    preset_names().join(", ")
                ))
            })?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.trials.is_empty() {
            return Err(Error::Schema("scenario has no trials".into()));
        }
        let mut ids = BTreeSet::new();
        for t in &self.trials {
            if !ids.insert(t.id) {
                return Err(Error::Schema(format!("trial {} listed twice", t.id)));
            }
            if t.n_per_arm == 0 {
                return Err(Error::Schema(format!("trial {} has no units", t.id)));
            }
            if t.active_vaccine == self.control_label {
                return Err(Error::Schema(format!(
                    "trial {} uses the control label as its active vaccine",
                    t.id
                )));
            }
            let probs = [t.p_w1, t.p_w2]
                .into_iter()
                .chain(t.sampling.y0)
                .chain(t.sampling.y1);
            for p in probs {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Schema(format!(
                        "trial {}: probability {p} outside [0,1]",
                        t.id
                    )));
                }
            }
        }
        if !(self.outcome.s_sd >= 0.0) {
            return Err(Error::Schema("response standard deviation must be non-negative".into()));
        }
        Ok(())
    }

    pub fn trial(&self, id: TrialId) -> Option<&TrialSpec> {
        self.trials.iter().find(|t| t.id == id)
    }

    pub fn total_size(&self) -> usize {
        self.trials.iter().map(TrialSpec::size).sum()
    }

    fn is_active(&self, vaccine: VaccineId) -> bool {
        self.trials.iter().any(|t| t.active_vaccine == vaccine)
    }
}

/// Replicate `replicate` of the scenario. Each replicate draws from its own
/// stream of a generator keyed by the base seed, so replicates are
/// independent and reproducible in any order.
pub fn generate(spec: &ScenarioSpec, replicate: u64) -> StackedDataset {
    let mut rng = ChaCha12Rng::seed_from_u64(spec.base_seed);
    rng.set_stream(replicate);
    let m = &spec.outcome;
    let mut units = Vec::with_capacity(spec.total_size());
    for t in &spec.trials {
        let two_phase = !t.sampling.all_sampled();
        for _ in 0..t.size() {
            let active = rng.random_bool(0.5);
            let w1 = rng.random_bool(t.p_w1) as u8 as f64;
            let w2 = rng.random_bool(t.p_w2) as u8 as f64;
            let z: f64 = rng.sample(StandardNormal);
            let s = m.s_mean(w1, w2, active) + m.s_sd * z;
            let y = rng.random_bool(m.p_y(w1, w2, active, s));
            let p_delta = t.sampling.prob(y, active);
            let delta = rng.random_bool(p_delta);
            units.push(ObservedUnit {
                trial: t.id,
                arm: if active {
                    t.active_vaccine
                } else {
                    spec.control_label
                },
                covariates: vec![Some(CovValue::Real(w1)), Some(CovValue::Real(w2))],
                delta,
                s: delta.then_some(s),
                y: Outcome::from_binary(y),
                weight_known: two_phase.then_some(p_delta),
            });
        }
    }
    let covariates = COVARIATES
        .iter()
        .map(|name| CovariateColumn {
            name: name.to_string(),
            kind: CovariateKind::Real,
        })
        .collect();
    let mut ds = StackedDataset::new(covariates, units).expect("simulated units are well formed");
    for t in &spec.trials {
        if let Some(info) = ds.registry.get_mut(&t.id) {
            info.design = if t.sampling.all_sampled() {
                Design::AllSampled
            } else {
                Design::TwoPhase
            };
        }
    }
    ds
}

/// E[S(a) | T ∈ t_ref], mixing trials by enrollment size.
pub fn analytic_truth(
    spec: &ScenarioSpec,
    t_ref: &BTreeSet<TrialId>,
    a: VaccineId,
) -> Result<f64> {
    if !spec.is_active(a) {
        return Err(contract(format!("vaccine {a} is not an active vaccine of the scenario")));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for id in t_ref {
        let t = spec
            .trial(*id)
            .ok_or_else(|| contract(format!("trial {id} is not part of the scenario")))?;
        let n = t.size() as f64;
        num += n * spec.outcome.s_mean(t.p_w1, t.p_w2, true);
        den += n;
    }
    if den == 0.0 {
        return Err(contract("empty referent trial set"));
    }
    Ok(num / den)
}

fn bern(p: f64, x: i64) -> f64 {
    if x == 1 {
        p
    } else {
        1.0 - p
    }
}

/// The scenario as a finite structural model, with the normal response
/// collapsed to its conditional mean.
pub fn scenario_dgp(spec: &ScenarioSpec) -> DiscreteDgp {
    let total = spec.total_size() as f64;
    let trials: Vec<(TrialId, f64)> = spec
        .trials
        .iter()
        .map(|t| (t.id, t.size() as f64 / total))
        .collect();
    let by_id: BTreeMap<TrialId, TrialSpec> =
        spec.trials.iter().map(|t| (t.id, t.clone())).collect();
    let control = spec.control_label;
    let m = spec.outcome;

    let pw = by_id.clone();
    let pa = by_id.clone();
    let pd = by_id;
    DiscreteDgp {
        trials,
        covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
        w_support: vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]],
        p_w: Box::new(move |t, w| {
            let ts = &pw[&t];
            bern(ts.p_w1, w[0]) * bern(ts.p_w2, w[1])
        }),
        p_arm: Box::new(move |t, _| vec![(pa[&t].active_vaccine, 0.5), (control, 0.5)]),
        s_dist: Box::new(move |_, w, a| {
            vec![(m.s_mean(w[0] as f64, w[1] as f64, a != control), 1.0)]
        }),
        p_y1: Box::new(move |_, w, a, s| m.p_y(w[0] as f64, w[1] as f64, a != control, s)),
        p_delta: Box::new(move |t, _, a, y, _| pd[&t].sampling.prob(y == Outcome::One, a != control)),
    }
}

/// True g_T(T_ref | W) and g_A(a | W) for every unit of a generated
/// dataset, from the design via Bayes' rule. `evaluation` is the set of
/// trials whose vaccine-a units count as treated.
pub fn exact_propensities(
    spec: &ScenarioSpec,
    ds: &StackedDataset,
    t_ref: &BTreeSet<TrialId>,
    a: VaccineId,
    evaluation: &BTreeSet<TrialId>,
) -> Result<KnownPropensities> {
    let total = spec.total_size() as f64;
    let i1 = ds.covariate_index(COVARIATES[0]).ok_or_else(|| contract("missing w1"))?;
    let i2 = ds.covariate_index(COVARIATES[1]).ok_or_else(|| contract("missing w2"))?;
    let mut g_t = Vec::with_capacity(ds.n());
    let mut g_a = Vec::with_capacity(ds.n());
    for u in &ds.units {
        let w = |i: usize| match &u.covariates[i] {
            Some(CovValue::Real(v)) => Ok(*v as i64),
            _ => Err(contract("simulated covariates must be numeric")),
        };
        let (w1, w2) = (w(i1)?, w(i2)?);
        let mut joint = 0.0;
        let mut in_ref = 0.0;
        let mut treated = 0.0;
        for t in &spec.trials {
            let p = t.size() as f64 / total * bern(t.p_w1, w1) * bern(t.p_w2, w2);
            joint += p;
            if t_ref.contains(&t.id) {
                in_ref += p;
            }
            if t.active_vaccine == a && evaluation.contains(&t.id) {
                treated += 0.5 * p;
            }
        }
        g_t.push(in_ref / joint);
        g_a.push(treated / joint);
    }
    Ok(KnownPropensities { g_t, g_a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimand::EstimandSpec;
    use crate::tmle::identify_exact;

    #[test]
    fn presets_reproduce_design_table() {
        let s1 = ScenarioSpec::preset("scenario1").unwrap();
        assert_eq!(
            s1.trials.iter().map(|t| t.n_per_arm).collect::<Vec<_>>(),
            vec![200, 150]
        );
        assert_eq!((s1.trials[0].p_w1, s1.trials[0].p_w2), (0.65, 0.8));
        assert_eq!((s1.trials[1].p_w1, s1.trials[1].p_w2), (0.5, 0.3));
        assert!(s1.trials.iter().all(|t| t.sampling.all_sampled()));
        let s2 = ScenarioSpec::preset("scenario2").unwrap();
        assert_eq!(s2.trials[0].n_per_arm, 5000);
        // Vaccine recipients are sampled at 0.05 and controls at 0.1,
        // whatever the outcome.
        assert_eq!(s2.trials[0].sampling.prob(true, true), 0.05);
        assert_eq!(s2.trials[0].sampling.prob(false, true), 0.05);
        assert_eq!(s2.trials[0].sampling.prob(true, false), 0.1);
        assert_eq!(s2.trials[0].sampling.prob(false, false), 0.1);
        assert!(s2.trials[1].sampling.all_sampled());
        let s3 = ScenarioSpec::preset("scenario3").unwrap();
        assert_eq!(
            s3.trials.iter().map(|t| t.n_per_arm).collect::<Vec<_>>(),
            vec![2000, 1500]
        );
        assert!(!s3.trials[1].sampling.all_sampled());
        assert!(ScenarioSpec::preset("scenario9").is_err());
    }

    #[test]
    fn truths_match_table() {
        let t1 = BTreeSet::from([TrialId(1)]);
        let t12 = BTreeSet::from([TrialId(1), TrialId(2)]);
        let s1 = ScenarioSpec::preset("scenario1").unwrap();
        assert!((analytic_truth(&s1, &t1, VaccineId(1)).unwrap() - 1.85).abs() < 1e-12);
        assert!((analytic_truth(&s1, &t12, VaccineId(2)).unwrap() - 2.0).abs() < 1e-12);
        let s2 = ScenarioSpec::preset("scenario2").unwrap();
        let v = analytic_truth(&s2, &t12, VaccineId(1)).unwrap();
        assert!((v - (5000.0 * 1.85 + 150.0 * 2.2) / 5150.0).abs() < 1e-12);
        assert!((v - 1.86).abs() < 5e-4);
        let s3 = ScenarioSpec::preset("scenario3").unwrap();
        assert!((analytic_truth(&s3, &t12, VaccineId(1)).unwrap() - 2.0).abs() < 1e-12);
        assert!(analytic_truth(&s1, &t1, VaccineId(3)).is_err());
    }

    #[test]
    fn truth_agrees_with_enumeration() {
        for name in preset_names() {
            let s = ScenarioSpec::preset(name).unwrap();
            let dgp = scenario_dgp(&s);
            for e in &s.estimands {
                let spec = EstimandSpec::new(
                    e.vaccine,
                    e.reference_trials.iter().copied(),
                    s.trials
                        .iter()
                        .filter(|t| t.active_vaccine == e.vaccine)
                        .map(|t| t.id),
                )
                .with_ws(&COVARIATES);
                let id = identify_exact(&dgp, &spec).unwrap();
                let truth = analytic_truth(&s, &e.reference_trials, e.vaccine).unwrap();
                assert!((id.counterfactual - truth).abs() < 1e-10, "{name}");
                assert!((id.observed - truth).abs() < 1e-10, "{name}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_replicate() {
        let s = ScenarioSpec::preset("scenario1").unwrap();
        let a = generate(&s, 7);
        let b = generate(&s, 7);
        let c = generate(&s, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n(), 700);
        assert!(a.units.iter().all(|u| u.delta));
        assert!(a.registry.values().all(|i| i.design == Design::AllSampled));
    }

    #[test]
    fn two_phase_fraction_matches_design() {
        let s = ScenarioSpec::preset("scenario2").unwrap();
        let ds = generate(&s, 0);
        let t1: Vec<_> = ds.units.iter().filter(|u| u.trial == TrialId(1)).collect();
        let frac = t1.iter().filter(|u| u.delta).count() as f64 / t1.len() as f64;
        // Expected 0.075 with binomial sd ≈ 0.0026.
        assert!((frac - 0.075).abs() < 0.011, "{frac}");
        assert_eq!(ds.registry[&TrialId(1)].design, Design::TwoPhase);
        assert_eq!(ds.registry[&TrialId(2)].design, Design::AllSampled);
        assert!(t1.iter().all(|u| u.weight_known.is_some()));
    }

    #[test]
    fn exact_propensities_are_probabilities() {
        let s = ScenarioSpec::preset("scenario1").unwrap();
        let ds = generate(&s, 0);
        let t1 = BTreeSet::from([TrialId(1)]);
        let k = exact_propensities(&s, &ds, &t1, VaccineId(1), &t1).unwrap();
        for (gt, ga) in k.g_t.iter().zip(&k.g_a) {
            assert!(*gt > 0.0 && *gt < 1.0);
            assert!((ga - 0.5 * gt).abs() < 1e-15);
        }
    }
}

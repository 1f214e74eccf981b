//! Propensity-type nuisance parameters: referent-trial membership g_T,
//! vaccine assignment g_A, and immune-response sampling g_Δ.

use serde::{Deserialize, Serialize};

use crate::data::{Design, StackedDataset, TrialId};
use crate::design::{Encoder, ExtraTerms, Learner};
use crate::error::{estimation, Result};
use crate::estimand::{EstimandSpec, Truncation};
use crate::glm::{fit_linear, fit_logistic, predict, Family, GlmFit};

/// A fitted regression together with the encoder that built its design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRegression {
    pub encoder: Encoder,
    pub fit: GlmFit,
}

impl FittedRegression {
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        learner: Learner,
        family: Family,
        ds: &StackedDataset,
        covariates: &[String],
        extra: ExtraTerms,
        rows: &[usize],
        y: &[f64],
        w: &[f64],
    ) -> Result<Self> {
        let encoder = Encoder::build(learner, ds, covariates, extra, rows)?;
        let x = encoder.matrix(ds, rows)?;
        let fit = match family {
            Family::Logistic => fit_logistic(&x, y, w, &vec![0.0; rows.len()])?,
            Family::Linear => fit_linear(&x, y, w)?,
        };
        Ok(Self { encoder, fit })
    }

    pub fn predict(&self, ds: &StackedDataset, rows: &[usize]) -> Result<Vec<f64>> {
        let x = self.encoder.matrix(ds, rows)?;
        predict(&self.fit, &x, &vec![0.0; rows.len()])
    }
}

/// Model for P(T ∈ T_ref | W_S).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialMembership {
    /// Every analysed unit is in a referent trial; the probability is 1.
    Constant,
    Fitted(FittedRegression),
}

/// How g_Δ is obtained for two-phase trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GDeltaMode {
    /// Use recorded design probabilities, estimating only where none exist.
    #[default]
    Known,
    /// Ignore recorded probabilities and estimate per trial.
    Estimate,
}

impl std::str::FromStr for GDeltaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "known" => Ok(Self::Known),
            "estimate" => Ok(Self::Estimate),
            other => Err(format!("unknown g-delta mode `{other}` (expected known or estimate)")),
        }
    }
}

/// Externally supplied g_T(T_ref | W) and g_A(a | W), one value per unit of
/// the dataset. Replaces the fitted models when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownPropensities {
    pub g_t: Vec<f64>,
    pub g_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNuisances {
    /// Dataset rows entering the analysis, in dataset order.
    pub population: Vec<usize>,
    pub g_t_model: TrialMembership,
    pub g_t_marginal: f64,
    pub g_a_model: FittedRegression,
    /// g_Δ for every unit of the dataset.
    pub g_delta: Vec<f64>,
    pub truncation: Truncation,
    pub known: Option<KnownPropensities>,
}

/// Per-unit nuisance values over the analysis population.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTable {
    pub rows: Vec<usize>,
    pub g_t: Vec<f64>,
    pub g_a: Vec<f64>,
    pub g_delta: Vec<f64>,
    pub g_t_marginal: f64,
}

/// Rows of every unit in a trial that collects all of W_S.
pub fn analysis_population(ds: &StackedDataset, spec: &EstimandSpec) -> Vec<usize> {
    let trials = spec.analysis_trials(ds);
    (0..ds.n())
        .filter(|&i| trials.contains(&ds.units[i].trial))
        .collect()
}

/// Whether unit `i` counts as a vaccine-a unit: received `a` in one of its
/// evaluation trials.
pub(crate) fn is_vaccine_unit(ds: &StackedDataset, spec: &EstimandSpec, i: usize) -> bool {
    let u = &ds.units[i];
    u.arm == spec.vaccine && spec.in_evaluation(u.trial)
}

pub fn fit_trial_membership(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    learner: Learner,
) -> Result<(TrialMembership, f64)> {
    let rows = analysis_population(ds, spec);
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| spec.in_reference(ds.units[i].trial) as u8 as f64)
        .collect();
    let n_ref = y.iter().filter(|&&v| v == 1.0).count();
    if n_ref == 0 {
        return Err(estimation("no analysed unit belongs to a referent trial"));
    }
    if n_ref == rows.len() {
        return Ok((TrialMembership::Constant, 1.0));
    }
    let marginal = n_ref as f64 / rows.len() as f64;
    let model = FittedRegression::fit(
        learner,
        Family::Logistic,
        ds,
        &spec.ws,
        ExtraTerms::default(),
        &rows,
        &y,
        &vec![1.0; rows.len()],
    )?;
    Ok((TrialMembership::Fitted(model), marginal))
}

/// Pooled P(A = a | W_S) over every analysed unit.
pub fn fit_treatment(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    learner: Learner,
) -> Result<FittedRegression> {
    let rows = analysis_population(ds, spec);
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| is_vaccine_unit(ds, spec, i) as u8 as f64)
        .collect();
    let n_a = y.iter().filter(|&&v| v == 1.0).count();
    if n_a == 0 {
        return Err(estimation(format!(
            "no unit received vaccine {} in its evaluation trials",
            spec.vaccine
        )));
    }
    if n_a == rows.len() {
        return Err(estimation(format!(
            "every analysed unit received vaccine {}; g_A is degenerate",
            spec.vaccine
        )));
    }
    FittedRegression::fit(
        learner,
        Family::Logistic,
        ds,
        &spec.ws,
        ExtraTerms::default(),
        &rows,
        &y,
        &vec![1.0; rows.len()],
    )
}

/// Per-unit sampling probabilities for the whole dataset, truncated below
/// at the lower bound. All-sampled trials get exactly 1 unless a known
/// weight says otherwise.
pub fn resolve_sampling(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    mode: GDeltaMode,
) -> Result<Vec<f64>> {
    let mut g = vec![1.0; ds.n()];
    let lo = spec.truncation.lo;
    let wds = spec.w_delta_s();
    for (&trial, info) in &ds.registry {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.units[i].trial == trial).collect();
        match info.design {
            Design::AllSampled => {
                for &i in &rows {
                    g[i] = ds.units[i].weight_known.unwrap_or(1.0).max(lo);
                }
            }
            Design::TwoPhase => {
                let all_known = rows.iter().all(|&i| ds.units[i].weight_known.is_some());
                let fitted = if mode == GDeltaMode::Estimate || !all_known {
                    Some(estimate_trial_sampling(ds, trial, &wds, &rows)?)
                } else {
                    None
                };
                for (k, &i) in rows.iter().enumerate() {
                    let known = match mode {
                        GDeltaMode::Known => ds.units[i].weight_known,
                        GDeltaMode::Estimate => None,
                    };
                    let p = known.unwrap_or_else(|| fitted.as_ref().expect("fitted")[k]);
                    g[i] = p.clamp(lo, 1.0);
                }
            }
        }
    }
    Ok(g)
}

fn estimate_trial_sampling(
    ds: &StackedDataset,
    trial: TrialId,
    wds: &[String],
    rows: &[usize],
) -> Result<Vec<f64>> {
    let sampled = rows.iter().filter(|&&i| ds.units[i].delta).count();
    if sampled == 0 || sampled == rows.len() {
        return Err(estimation(format!(
            "trial {trial}: sampling probabilities unknown and delta has a single class"
        )));
    }
    let collected = &ds.registry[&trial].collected;
    let covs: Vec<String> = wds.iter().filter(|c| collected.contains(*c)).cloned().collect();
    let y: Vec<f64> = rows.iter().map(|&i| ds.units[i].delta as u8 as f64).collect();
    let model = FittedRegression::fit(
        Learner::MainTerms,
        Family::Logistic,
        ds,
        &covs,
        ExtraTerms {
            outcome: true,
            arm: true,
        },
        rows,
        &y,
        &vec![1.0; rows.len()],
    )?;
    model.predict(ds, rows)
}

#[derive(Debug, Clone, Default)]
pub struct NuisanceOptions {
    pub learner: Learner,
    pub gdelta: GDeltaMode,
    pub known: Option<KnownPropensities>,
}

pub fn fit_nuisances(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    opts: &NuisanceOptions,
) -> Result<FittedNuisances> {
    let population = analysis_population(ds, spec);
    let (g_t_model, g_t_marginal) = fit_trial_membership(ds, spec, opts.learner)?;
    let g_a_model = fit_treatment(ds, spec, opts.learner)?;
    let g_delta = resolve_sampling(ds, spec, opts.gdelta)?;
    if let Some(k) = &opts.known {
        if k.g_t.len() != ds.n() || k.g_a.len() != ds.n() {
            return Err(crate::error::contract(
                "known propensities must have one value per dataset unit",
            ));
        }
    }
    Ok(FittedNuisances {
        population,
        g_t_model,
        g_t_marginal,
        g_a_model,
        g_delta,
        truncation: spec.truncation,
        known: opts.known.clone(),
    })
}

/// Truncated (g_T(T_ref | W), g_A(a | W), g_Δ) for every analysed unit.
pub fn evaluate(fitted: &FittedNuisances, ds: &StackedDataset) -> Result<NuisanceTable> {
    let rows = fitted.population.clone();
    let t = fitted.truncation;
    let g_t = match (&fitted.known, &fitted.g_t_model) {
        (_, TrialMembership::Constant) => vec![1.0; rows.len()],
        (Some(k), _) => rows.iter().map(|&i| t.apply(k.g_t[i])).collect(),
        (None, TrialMembership::Fitted(m)) => {
            m.predict(ds, &rows)?.into_iter().map(|p| t.apply(p)).collect()
        }
    };
    let g_a = match &fitted.known {
        Some(k) => rows.iter().map(|&i| t.apply(k.g_a[i])).collect(),
        None => fitted
            .g_a_model
            .predict(ds, &rows)?
            .into_iter()
            .map(|p| t.apply(p))
            .collect(),
    };
    let g_delta = rows.iter().map(|&i| fitted.g_delta[i]).collect();
    Ok(NuisanceTable {
        rows,
        g_t,
        g_a,
        g_delta,
        g_t_marginal: fitted.g_t_marginal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_stacked_csv, ColumnSchema, VaccineId};

    fn ds(text: &str) -> StackedDataset {
        read_stacked_csv(text.as_bytes(), &ColumnSchema::default()).unwrap()
    }

    const SINGLE: &str = "\
trial,arm,delta,s,y,weight,W1
1,1,1,1.0,,,0
1,1,1,2.0,,,1
1,0,1,0.5,,,1
1,0,1,0.7,,,0
1,1,1,1.5,,,1
1,0,1,0.1,,,0
";

    #[test]
    fn all_trials_referent_is_constant() {
        let d = ds(SINGLE);
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(1)]).with_ws(&["W1"]);
        let (m, marginal) = fit_trial_membership(&d, &spec, Learner::MainTerms).unwrap();
        assert_eq!(m, TrialMembership::Constant);
        assert_eq!(marginal, 1.0);
        let fitted = fit_nuisances(&d, &spec, &NuisanceOptions::default()).unwrap();
        let tab = evaluate(&fitted, &d).unwrap();
        assert!(tab.g_t.iter().all(|&v| v == 1.0));
        assert!(tab.g_delta.iter().all(|&v| v == 1.0));
        for &g in &tab.g_a {
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn treatment_without_covariates_is_arm_fraction() {
        let d = ds(SINGLE);
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(1)]);
        let m = fit_treatment(&d, &spec, Learner::MainTerms).unwrap();
        for p in m.predict(&d, &[0, 1, 2]).unwrap() {
            assert!((p - 0.5).abs() < 1e-10);
        }
        let none = EstimandSpec::for_dataset(&d, VaccineId(7), [TrialId(1)]);
        assert!(fit_treatment(&d, &none, Learner::MainTerms).is_err());
    }

    #[test]
    fn truncation_engages_on_known_weights() {
        let text = "trial,arm,delta,s,y,weight\n1,1,1,1.0,0,0.001\n1,1,0,,0,0.001\n1,0,1,0.4,1,0.5\n";
        let d = ds(text);
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(1)])
            .with_truncation(Truncation::new(0.005, 0.995).unwrap());
        let g = resolve_sampling(&d, &spec, GDeltaMode::Known).unwrap();
        assert_eq!(g, vec![0.005, 0.005, 0.5]);
    }

    #[test]
    fn two_phase_without_weights_or_classes_errors() {
        let text = "trial,arm,delta,s,y,weight\n1,1,0,,0,\n1,1,0,,1,\n2,1,1,0.3,,\n";
        let mut d = ds(text);
        d.registry.get_mut(&TrialId(1)).unwrap().design = Design::TwoPhase;
        let spec = EstimandSpec::for_dataset(&d, VaccineId(1), [TrialId(2)]);
        assert!(resolve_sampling(&d, &spec, GDeltaMode::Known).is_err());
    }
}

//! Sequential-regression TMLE for a standardized mean immune response.
//!
//! The estimator follows eight steps: fit g_T, g_A and g_Δ; regress the
//! rescaled response on outcome and covariates among measured vaccine-a
//! units (Q̄₂); target Q̄₂ with clever covariate H₂; regress the targeted
//! predictions on W_S among all vaccine-a units (Q̄₁); target Q̄₁ with H₁;
//! average the targeted Q̄₁ over the referent trials.

mod eif;
mod identify;
mod scale;
mod unadjusted;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{StackedDataset, TrialId, VaccineId};
use crate::design::{ExtraTerms, Learner};
use crate::error::{estimation, Error, Result};
use crate::estimand::{EstimandSpec, OutcomeScale};
use crate::glm::{expit, fit_fluctuation, logit, Family, FluctuationFit};
use crate::nuisance::{
    evaluate, fit_nuisances, is_vaccine_unit, FittedNuisances, FittedRegression, GDeltaMode,
    KnownPropensities, NuisanceOptions, NuisanceTable,
};
use crate::stats::{mean, sample_sd};
use crate::validate::validate;

pub use eif::{compute_eif, full_data_eif};
pub use identify::{identify_exact, DiscreteDgp, Identification, MAX_ATOMS};
pub use scale::{fit_transform, scale_outcome, OutcomeTransform, TransformKind, DEFAULT_MARGIN};
pub use unadjusted::estimate_unadjusted;

/// Normal quantile used for every 95% Wald interval.
pub const Z95: f64 = 1.96;

/// Predictions are kept this far from 0 and 1 before taking logits.
pub const Q_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Tmle,
    Unadjusted,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    /// Units in trials that collect every adjustment covariate.
    pub n_analysed: usize,
    pub n_vaccine: usize,
    pub n_measured: usize,
    pub mean_eif: f64,
    pub sd_eif: f64,
    pub fluctuation_converged: (bool, bool),
    pub fluctuation_scores: (f64, f64),
    /// Convergence of each nuisance regression, by name.
    pub nuisance_converged: BTreeMap<String, bool>,
    pub g_t_marginal: f64,
    pub min_g_a: f64,
    pub min_g_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimator: Estimator,
    pub vaccine: VaccineId,
    pub reference_trials: BTreeSet<TrialId>,
    pub scale: OutcomeScale,
    /// Estimate on the reporting scale (log10 scale for log estimands).
    pub psi: f64,
    pub psi_unit_scale: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// Influence-function value for every dataset unit, on the reporting
    /// scale. Not serialized.
    #[serde(skip)]
    pub eif: Vec<f64>,
    /// Fluctuation coefficients (β₂, β₁).
    pub epsilons: (f64, f64),
    pub transform: OutcomeTransform,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleOptions {
    pub q2_learner: Learner,
    pub q1_learner: Learner,
    pub g_learner: Learner,
    pub gdelta: GDeltaMode,
    /// Range padding for the unit-interval rescaling; see [`scale_outcome`].
    pub margin: Option<f64>,
    pub known: Option<KnownPropensities>,
}

impl Default for TmleOptions {
    fn default() -> Self {
        Self {
            q2_learner: Learner::MainTerms,
            q1_learner: Learner::MainTerms,
            g_learner: Learner::MainTerms,
            gdelta: GDeltaMode::Known,
            margin: Some(DEFAULT_MARGIN),
            known: None,
        }
    }
}

/// The outcome regressions, initial and targeted. Vectors are aligned with
/// the nuisance table rows; Q̄₂ entries exist only for vaccine-a units.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialRegressions {
    pub q2: FittedRegression,
    pub q2_fluctuation: FluctuationFit,
    pub q2_initial: Vec<Option<f64>>,
    pub q2_star: Vec<Option<f64>>,
    pub h2: Vec<Option<f64>>,
    pub q1: FittedRegression,
    pub q1_fluctuation: FluctuationFit,
    pub q1_initial: Vec<f64>,
    pub q1_star: Vec<f64>,
    pub h1: Vec<f64>,
}

/// Everything a TMLE run produced, for callers that need the intermediates.
#[derive(Debug, Clone)]
pub struct TmleRun {
    pub estimate: EstimateResult,
    pub nuisances: FittedNuisances,
    pub table: NuisanceTable,
    pub regressions: SequentialRegressions,
    /// Population-aligned EIF on the unit scale, before back-mapping.
    pub eif_unit: Vec<f64>,
}

pub fn run_tmle(ds: &StackedDataset, spec: &EstimandSpec, opts: &TmleOptions) -> Result<EstimateResult> {
    Ok(run_tmle_detailed(ds, spec, opts)?.estimate)
}

#[inline]
fn clip(p: f64) -> f64 {
    p.clamp(Q_CLIP, 1.0 - Q_CLIP)
}

pub fn run_tmle_detailed(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    opts: &TmleOptions,
) -> Result<TmleRun> {
    let report = validate(ds, spec);
    if !report.is_ok() {
        return Err(Error::Validation(report.render()));
    }

    // Steps 1-3.
    let nuisances = fit_nuisances(
        ds,
        spec,
        &NuisanceOptions {
            learner: opts.g_learner,
            gdelta: opts.gdelta,
            known: opts.known.clone(),
        },
    )?;
    let table = evaluate(&nuisances, ds)?;
    let rows = &table.rows;
    let np = rows.len();

    // Positions (within the population) of vaccine-a units and of the
    // measured ones among them.
    let vacc: Vec<usize> = (0..np).filter(|&k| is_vaccine_unit(ds, spec, rows[k])).collect();
    let measured: Vec<usize> = vacc
        .iter()
        .copied()
        .filter(|&k| ds.units[rows[k]].delta)
        .collect();
    if measured.is_empty() {
        return Err(estimation("no measured vaccine-a units"));
    }
    let in_ref: Vec<bool> = rows.iter().map(|&i| spec.in_reference(ds.units[i].trial)).collect();
    if !in_ref.iter().any(|&b| b) {
        return Err(crate::error::contract("referent trial set contains no analysed unit"));
    }

    let s_raw: Vec<f64> = measured
        .iter()
        .map(|&k| ds.units[rows[k]].s.expect("measured unit has s"))
        .collect();
    let transform = fit_transform(&s_raw, spec.scale, opts.margin)?;
    let s_unit: Vec<f64> = s_raw.iter().map(|&v| transform.forward(v)).collect();
    let family = match spec.scale {
        OutcomeScale::Binary => Family::Logistic,
        _ => Family::Linear,
    };

    // Step 4: Q̄₂ among measured vaccine-a units.
    let wds = spec.w_delta_s();
    let meas_rows: Vec<usize> = measured.iter().map(|&k| rows[k]).collect();
    let vacc_rows: Vec<usize> = vacc.iter().map(|&k| rows[k]).collect();
    let q2 = FittedRegression::fit(
        opts.q2_learner,
        family,
        ds,
        &wds,
        ExtraTerms {
            outcome: true,
            arm: false,
        },
        &meas_rows,
        &s_unit,
        &vec![1.0; meas_rows.len()],
    )?;
    let q2_vacc: Vec<f64> = q2.predict(ds, &vacc_rows)?.into_iter().map(clip).collect();

    // Step 5: target Q̄₂.
    let mut h2 = vec![None; np];
    let mut q2_initial = vec![None; np];
    for (j, &k) in vacc.iter().enumerate() {
        h2[k] = Some(table.g_t[k] / (table.g_delta[k] * table.g_a[k] * table.g_t_marginal));
        q2_initial[k] = Some(q2_vacc[j]);
    }
    let off2: Vec<f64> = measured.iter().map(|&k| logit(q2_initial[k].unwrap())).collect();
    let hh2: Vec<f64> = measured.iter().map(|&k| h2[k].unwrap()).collect();
    let fl2 = fit_fluctuation(&off2, &hh2, &s_unit, &vec![1.0; measured.len()])?;
    if !fl2.converged {
        return Err(estimation(format!(
            "Q2 fluctuation did not converge (epsilon {}, score {:e})",
            fl2.epsilon, fl2.score
        )));
    }
    let mut q2_star = vec![None; np];
    for &k in &vacc {
        q2_star[k] = Some(expit(logit(q2_initial[k].unwrap()) + fl2.epsilon * h2[k].unwrap()));
    }

    // Step 6: Q̄₁ among all vaccine-a units.
    let pseudo: Vec<f64> = vacc.iter().map(|&k| q2_star[k].unwrap()).collect();
    let q1_learner = if single_profile(ds, &spec.ws, &vacc_rows) {
        Learner::InterceptOnly
    } else {
        opts.q1_learner
    };
    // The pseudo-outcome lies in (0,1); a quasi-binomial fit keeps Q̄₁ there.
    let q1 = FittedRegression::fit(
        q1_learner,
        Family::Logistic,
        ds,
        &spec.ws,
        ExtraTerms::default(),
        &vacc_rows,
        &pseudo,
        &vec![1.0; vacc_rows.len()],
    )?;
    let q1_initial: Vec<f64> = q1.predict(ds, rows)?.into_iter().map(clip).collect();

    // Step 7: target Q̄₁.
    let h1: Vec<f64> = (0..np)
        .map(|k| table.g_t[k] / (table.g_a[k] * table.g_t_marginal))
        .collect();
    let off1: Vec<f64> = vacc.iter().map(|&k| logit(q1_initial[k])).collect();
    let hh1: Vec<f64> = vacc.iter().map(|&k| h1[k]).collect();
    let fl1 = fit_fluctuation(&off1, &hh1, &pseudo, &vec![1.0; vacc.len()])?;
    if !fl1.converged {
        return Err(estimation(format!(
            "Q1 fluctuation did not converge (epsilon {}, score {:e})",
            fl1.epsilon, fl1.score
        )));
    }
    let q1_star: Vec<f64> = (0..np)
        .map(|k| expit(logit(q1_initial[k]) + fl1.epsilon * h1[k]))
        .collect();

    // Step 8: plug-in over referent units.
    let ref_vals: Vec<f64> = (0..np).filter(|&k| in_ref[k]).map(|k| q1_star[k]).collect();
    let psi_unit = mean(&ref_vals);

    let regressions = SequentialRegressions {
        q2,
        q2_fluctuation: fl2,
        q2_initial,
        q2_star,
        h2,
        q1,
        q1_fluctuation: fl1,
        q1_initial,
        q1_star,
        h1,
    };
    let eif_unit = compute_eif(ds, spec, &table, &regressions, &transform, psi_unit)?;

    // Back to the whole dataset and the reporting scale.
    let n = ds.n();
    let factor = transform.slope() * n as f64 / np as f64;
    let mut eif = vec![0.0; n];
    for (k, &i) in rows.iter().enumerate() {
        eif[i] = factor * eif_unit[k];
    }
    let psi = transform.inverse(psi_unit);
    let sd = sample_sd(&eif);
    let se = sd / (n as f64).sqrt();

    let mut nuisance_converged = BTreeMap::new();
    if let crate::nuisance::TrialMembership::Fitted(m) = &nuisances.g_t_model {
        nuisance_converged.insert("g_t".to_string(), m.fit.converged);
    }
    nuisance_converged.insert("g_a".to_string(), nuisances.g_a_model.fit.converged);
    nuisance_converged.insert("q2".to_string(), regressions.q2.fit.converged);
    nuisance_converged.insert("q1".to_string(), regressions.q1.fit.converged);

    let diagnostics = Diagnostics {
        n,
        n_analysed: np,
        n_vaccine: vacc.len(),
        n_measured: measured.len(),
        mean_eif: mean(&eif),
        sd_eif: sd,
        fluctuation_converged: (fl2.converged, fl1.converged),
        fluctuation_scores: (fl2.score, fl1.score),
        nuisance_converged,
        g_t_marginal: table.g_t_marginal,
        min_g_a: table.g_a.iter().copied().fold(f64::INFINITY, f64::min),
        min_g_delta: vacc
            .iter()
            .map(|&k| table.g_delta[k])
            .fold(f64::INFINITY, f64::min),
    };

    let estimate = EstimateResult {
        estimator: Estimator::Tmle,
        vaccine: spec.vaccine,
        reference_trials: spec.reference_trials.clone(),
        scale: spec.scale,
        psi,
        psi_unit_scale: psi_unit,
        se,
        ci: wald_interval(psi, se, spec.scale),
        eif,
        epsilons: (fl2.epsilon, fl1.epsilon),
        transform,
        diagnostics,
    };
    Ok(TmleRun {
        estimate,
        nuisances,
        table,
        regressions,
        eif_unit,
    })
}

fn single_profile(ds: &StackedDataset, ws: &[String], rows: &[usize]) -> bool {
    let idx: Vec<usize> = ws.iter().filter_map(|c| ds.covariate_index(c)).collect();
    let profiles: BTreeSet<Vec<String>> = rows
        .iter()
        .map(|&r| {
            idx.iter()
                .map(|&i| {
                    ds.units[r].covariates[i]
                        .as_ref()
                        .map(|v| v.to_string())
                        .unwrap_or_default()
                })
                .collect()
        })
        .collect();
    profiles.len() <= 1
}

/// 95% Wald interval. Response rates use the logit scale so the interval
/// stays inside (0,1).
pub fn wald_interval(psi: f64, se: f64, scale: OutcomeScale) -> (f64, f64) {
    match scale {
        OutcomeScale::Binary if psi > 0.0 && psi < 1.0 => {
            let l = logit(psi);
            let s = se / (psi * (1.0 - psi));
            (expit(l - Z95 * s), expit(l + Z95 * s))
        }
        OutcomeScale::Binary => ((psi - Z95 * se).max(0.0), (psi + Z95 * se).min(1.0)),
        _ => (psi - Z95 * se, psi + Z95 * se),
    }
}

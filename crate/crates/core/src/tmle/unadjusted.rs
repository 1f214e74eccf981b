use std::collections::BTreeSet;

use crate::data::{StackedDataset, TrialId, VaccineId};
use crate::error::{estimation, Error, Result};
use crate::estimand::OutcomeScale;
use crate::stats::{mean, sample_sd};

use super::{wald_interval, Diagnostics, EstimateResult, Estimator, OutcomeTransform};

/// Sampling-weighted (Hájek) mean response of one arm over a set of trials.
///
/// `g_delta` holds the sampling probability of every dataset unit, as
/// returned by [`crate::nuisance::resolve_sampling`]. The influence function
/// is expressed over the whole dataset so it can be differenced against
/// other estimates of the same data.
pub fn estimate_unadjusted(
    ds: &StackedDataset,
    vaccine: VaccineId,
    trials: &BTreeSet<TrialId>,
    scale: OutcomeScale,
    g_delta: &[f64],
) -> Result<EstimateResult> {
    let n = ds.n();
    if g_delta.len() != n {
        return Err(Error::Contract("g_delta must cover every unit".into()));
    }
    let mut members = Vec::new();
    for (i, u) in ds.units.iter().enumerate() {
        if u.arm != vaccine || !trials.contains(&u.trial) || !u.delta {
            continue;
        }
        let s = u.s.expect("measured unit has s");
        let v = match scale {
            OutcomeScale::Identity => s,
            OutcomeScale::Log10 => {
                if !(s > 0.0) {
                    return Err(Error::Domain(format!(
                        "row {i}: log10 scale requires a positive response, found {s}"
                    )));
                }
                s.log10()
            }
            OutcomeScale::Binary => {
                if s != 0.0 && s != 1.0 {
                    return Err(Error::Domain(format!("row {i}: response {s} is not 0/1")));
                }
                s
            }
        };
        members.push((i, v, 1.0 / g_delta[i]));
    }
    if members.is_empty() {
        return Err(estimation(format!(
            "no measured units for vaccine {vaccine} in the requested trials"
        )));
    }
    let total_w: f64 = members.iter().map(|m| m.2).sum();
    let psi = members.iter().map(|m| m.1 * m.2).sum::<f64>() / total_w;
    let norm = total_w / n as f64;
    let mut eif = vec![0.0; n];
    for &(i, v, w) in &members {
        eif[i] = w * (v - psi) / norm;
    }
    let sd = sample_sd(&eif);
    let se = sd / (n as f64).sqrt();
    Ok(EstimateResult {
        estimator: Estimator::Unadjusted,
        vaccine,
        reference_trials: trials.clone(),
        scale,
        psi,
        psi_unit_scale: psi,
        se,
        ci: wald_interval(psi, se, scale),
        epsilons: (0.0, 0.0),
        transform: OutcomeTransform::identity(),
        diagnostics: Diagnostics {
            n,
            n_analysed: n,
            n_vaccine: ds
                .units
                .iter()
                .filter(|u| u.arm == vaccine && trials.contains(&u.trial))
                .count(),
            n_measured: members.len(),
            mean_eif: mean(&eif),
            sd_eif: sd,
            fluctuation_converged: (true, true),
            ..Default::default()
        },
        eif,
    })
}

use crate::data::StackedDataset;
use crate::error::{contract, Result};
use crate::estimand::EstimandSpec;
use crate::nuisance::{is_vaccine_unit, NuisanceTable};

use super::{OutcomeTransform, SequentialRegressions};

/// Observed-data efficient influence function on the unit scale, one value
/// per row of `table`:
///
/// ```text
/// D = Δ·1{A=a}·H₂·(S − Q̄₂*) + 1{A=a}·H₁·(Q̄₂* − Q̄₁*) + 1{T∈T_ref}/g_T(T_ref)·(Q̄₁* − ψ)
/// ```
///
/// with H₂ = g_T(T_ref|W) / (g_Δ g_A(a|W) g_T(T_ref)) and
/// H₁ = g_T(T_ref|W) / (g_A(a|W) g_T(T_ref)).
pub fn compute_eif(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    table: &NuisanceTable,
    sr: &SequentialRegressions,
    transform: &OutcomeTransform,
    psi_unit: f64,
) -> Result<Vec<f64>> {
    let np = table.rows.len();
    if sr.q1_star.len() != np || sr.q2_star.len() != np {
        return Err(contract("regressions are not aligned with the nuisance table"));
    }
    let mut out = Vec::with_capacity(np);
    for (k, &i) in table.rows.iter().enumerate() {
        let u = &ds.units[i];
        let mut d = 0.0;
        if is_vaccine_unit(ds, spec, i) {
            let q2 = sr.q2_star[k].ok_or_else(|| contract("missing Q2* for a vaccine unit"))?;
            let h2 = sr.h2[k].ok_or_else(|| contract("missing H2 for a vaccine unit"))?;
            if u.delta {
                let s = transform.forward(u.s.expect("measured unit has s"));
                d += h2 * (s - q2);
            }
            d += sr.h1[k] * (q2 - sr.q1_star[k]);
        }
        if spec.in_reference(u.trial) {
            d += (sr.q1_star[k] - psi_unit) / table.g_t_marginal;
        }
        out.push(d);
    }
    Ok(out)
}

/// Full-data influence function (every response measured):
///
/// ```text
/// D_X = 1{A=a}/g_A(a|W) · g_T(T_ref|W)/g_T(T_ref) · (S − Q̄) + 1{T∈T_ref}/g_T(T_ref) · (Q̄ − ψ)
/// ```
///
/// `q_bar` is aligned with the rows of `table`. Fails if a vaccine-a unit
/// has no measured response.
pub fn full_data_eif(
    ds: &StackedDataset,
    spec: &EstimandSpec,
    table: &NuisanceTable,
    q_bar: &[f64],
    transform: &OutcomeTransform,
    psi_unit: f64,
) -> Result<Vec<f64>> {
    if q_bar.len() != table.rows.len() {
        return Err(contract("Q vector is not aligned with the nuisance table"));
    }
    let mut out = Vec::with_capacity(q_bar.len());
    for (k, &i) in table.rows.iter().enumerate() {
        let u = &ds.units[i];
        let mut d = 0.0;
        if is_vaccine_unit(ds, spec, i) {
            let s = u
                .s
                .ok_or_else(|| contract("full-data influence function needs every response"))?;
            let ratio = table.g_t[k] / table.g_t_marginal;
            d += ratio / table.g_a[k] * (transform.forward(s) - q_bar[k]);
        }
        if spec.in_reference(u.trial) {
            d += (q_bar[k] - psi_unit) / table.g_t_marginal;
        }
        out.push(d);
    }
    Ok(out)
}

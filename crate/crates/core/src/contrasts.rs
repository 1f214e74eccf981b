//! Contrasts between two standardized estimates computed on the same data.
//!
//! Both estimates carry per-unit influence functions over the same dataset,
//! so the contrast's influence function is their unit-wise difference. This
//! accounts for units that enter both estimates.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::estimand::OutcomeScale;
use crate::normal::two_sided_p;
use crate::stats::sample_sd;
use crate::tmle::{EstimateResult, Estimator, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastKind {
    Difference,
    LogRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    pub p: f64,
    /// Set when se = 0 and z is undefined or infinite.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub kind: ContrastKind,
    /// Difference, or ratio of geometric means after exponentiation.
    pub estimate: f64,
    /// Estimate on the linear scale (log10 difference for ratios).
    pub linear_estimate: f64,
    /// Standard error on the linear scale.
    pub se: f64,
    pub ci: (f64, f64),
    pub z: f64,
    pub p_value: f64,
    pub degenerate: bool,
    pub components: (EstimateResult, EstimateResult),
}

/// z = (estimate − null)/se and p = 2(1 − Φ(|z|)).
pub fn wald_test(estimate: f64, se: f64, null: f64) -> Result<WaldTest> {
    if se < 0.0 || se.is_nan() {
        return Err(contract(format!("standard error must be non-negative, got {se}")));
    }
    if se == 0.0 {
        let same = estimate == null;
        return Ok(WaldTest {
            z: if same {
                f64::NAN
            } else {
                (estimate - null).signum() * f64::INFINITY
            },
            p: if same { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let z = (estimate - null) / se;
    Ok(WaldTest {
        z,
        p: two_sided_p(z),
        degenerate: false,
    })
}

fn check_aligned(ra: &EstimateResult, rb: &EstimateResult) -> Result<()> {
    if ra.eif.is_empty() || ra.eif.len() != rb.eif.len() {
        return Err(contract(format!(
            "influence functions are not unit-aligned ({} vs {} units)",
            ra.eif.len(),
            rb.eif.len()
        )));
    }
    if ra.estimator != rb.estimator {
        return Err(contract("cannot contrast estimates from different estimators"));
    }
    if ra.estimator == Estimator::Tmle && ra.reference_trials != rb.reference_trials {
        return Err(contract("estimates standardize to different referent trial sets"));
    }
    if ra.scale != rb.scale {
        return Err(contract("estimates are on different outcome scales"));
    }
    Ok(())
}

fn linear_contrast(ra: &EstimateResult, rb: &EstimateResult) -> (f64, f64) {
    let d: Vec<f64> = rb.eif.iter().zip(&ra.eif).map(|(b, a)| b - a).collect();
    let se = sample_sd(&d) / (d.len() as f64).sqrt();
    (rb.psi - ra.psi, se)
}

/// ψ_b − ψ_a with the influence-function difference for inference.
pub fn contrast_difference(ra: &EstimateResult, rb: &EstimateResult) -> Result<ContrastResult> {
    check_aligned(ra, rb)?;
    let (est, se) = linear_contrast(ra, rb);
    let w = wald_test(est, se, 0.0)?;
    Ok(ContrastResult {
        kind: ContrastKind::Difference,
        estimate: est,
        linear_estimate: est,
        se,
        ci: (est - Z95 * se, est + Z95 * se),
        z: w.z,
        p_value: w.p,
        degenerate: w.degenerate,
        components: (ra.clone(), rb.clone()),
    })
}

/// Ratio of geometric means 10^(ψ_log,b − ψ_log,a), with the interval
/// exponentiated from the log10 scale.
pub fn contrast_geomean_ratio(ra: &EstimateResult, rb: &EstimateResult) -> Result<ContrastResult> {
    if ra.scale != OutcomeScale::Log10 || rb.scale != OutcomeScale::Log10 {
        return Err(contract("geometric-mean ratios need log10-scale estimates"));
    }
    check_aligned(ra, rb)?;
    let (lin, se) = linear_contrast(ra, rb);
    let w = wald_test(lin, se, 0.0)?;
    Ok(ContrastResult {
        kind: ContrastKind::LogRatio,
        estimate: 10f64.powf(lin),
        linear_estimate: lin,
        se,
        ci: (10f64.powf(lin - Z95 * se), 10f64.powf(lin + Z95 * se)),
        z: w.z,
        p_value: w.p,
        degenerate: w.degenerate,
        components: (ra.clone(), rb.clone()),
    })
}

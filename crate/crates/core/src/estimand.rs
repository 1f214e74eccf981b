//! What is being estimated: one vaccine's mean immune response, standardized
//! to the covariate distribution of a set of referent trials.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{StackedDataset, TrialId, VaccineId};
use crate::error::{contract, Result};

/// Scale on which the immune response is analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeScale {
    Identity,
    /// Analysed as log10(S); geometric means come from exponentiating.
    Log10,
    /// S is a 0/1 response indicator; estimates are response rates.
    Binary,
}

impl std::str::FromStr for OutcomeScale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Self::Identity),
            "log10" => Ok(Self::Log10),
            "binary" => Ok(Self::Binary),
            other => Err(format!(
                "unknown scale `{other}` (expected identity, log10 or binary)"
            )),
        }
    }
}

/// Bounds applied to every estimated probability that ends up in a
/// denominator. The default floor of 0.001 stays below propensities that
/// arise legitimately when one stacked trial is much smaller than another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            lo: 0.001,
            hi: 0.999,
        }
    }
}

impl Truncation {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(contract(format!(
                "truncation bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSpec {
    pub vaccine: VaccineId,
    /// Referent trials whose covariate distribution we standardize to.
    pub reference_trials: BTreeSet<TrialId>,
    /// Trials in which `vaccine` was evaluated.
    pub evaluation_trials: BTreeSet<TrialId>,
    /// Adjustment covariates.
    pub ws: Vec<String>,
    /// Covariates that drive two-phase sampling.
    pub wdelta: Vec<String>,
    pub scale: OutcomeScale,
    pub truncation: Truncation,
}

impl EstimandSpec {
    pub fn new(
        vaccine: VaccineId,
        reference_trials: impl IntoIterator<Item = TrialId>,
        evaluation_trials: impl IntoIterator<Item = TrialId>,
    ) -> Self {
        Self {
            vaccine,
            reference_trials: reference_trials.into_iter().collect(),
            evaluation_trials: evaluation_trials.into_iter().collect(),
            ws: Vec::new(),
            wdelta: Vec::new(),
            scale: OutcomeScale::Identity,
            truncation: Truncation::default(),
        }
    }

    /// Evaluation trials default to every trial where the vaccine appears.
    pub fn for_dataset(
        ds: &StackedDataset,
        vaccine: VaccineId,
        reference_trials: impl IntoIterator<Item = TrialId>,
    ) -> Self {
        Self::new(vaccine, reference_trials, ds.trials_with_vaccine(vaccine))
    }

    pub fn with_ws<S: AsRef<str>>(mut self, ws: &[S]) -> Self {
        self.ws = ws.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_wdelta<S: AsRef<str>>(mut self, wdelta: &[S]) -> Self {
        self.wdelta = wdelta.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    pub fn with_scale(mut self, scale: OutcomeScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_truncation(mut self, truncation: Truncation) -> Self {
        self.truncation = truncation;
        self
    }

    /// W_S ∪ W_Δ, in W_S-first order without duplicates.
    pub fn w_delta_s(&self) -> Vec<String> {
        let mut out = self.ws.clone();
        for c in &self.wdelta {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn in_reference(&self, t: TrialId) -> bool {
        self.reference_trials.contains(&t)
    }

    pub fn in_evaluation(&self, t: TrialId) -> bool {
        self.evaluation_trials.contains(&t)
    }

    /// Trials whose data enter the nuisance fits: every registered trial
    /// that collects all of W_S.
    pub fn analysis_trials(&self, ds: &StackedDataset) -> BTreeSet<TrialId> {
        ds.registry
            .iter()
            .filter(|(_, info)| self.ws.iter().all(|c| info.collected.contains(c)))
            .map(|(t, _)| *t)
            .collect()
    }
}

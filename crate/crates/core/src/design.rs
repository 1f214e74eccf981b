//! Turns dataset rows into regression designs. Categorical covariates, the
//! clinical outcome and arm labels are one-hot expanded here and nowhere
//! else; the first level in sorted order is the reference.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{CovValue, CovariateKind, ObservedUnit, Outcome, StackedDataset, VaccineId};
use crate::error::{contract, Result};
use crate::glm::DesignMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Term {
    Intercept,
    Real(usize),
    Level(usize, String),
    Outcome(Outcome),
    Arm(VaccineId),
    /// Indicator of one full covariate profile (saturated designs).
    Profile(Vec<usize>, Vec<String>),
}

/// How a nuisance regression builds its design from covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    /// Intercept plus main terms.
    #[default]
    MainTerms,
    /// Intercept only; ignores covariates.
    InterceptOnly,
    /// One indicator per observed covariate profile (cell means). Only
    /// sensible for discrete covariates.
    Saturated,
}

/// Extra regressors beyond the covariates.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExtraTerms {
    pub outcome: bool,
    pub arm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    terms: Vec<Term>,
}

impl Encoder {
    /// Builds the encoder from the levels present among `rows`.
    pub fn build(
        learner: Learner,
        ds: &StackedDataset,
        covariates: &[String],
        extra: ExtraTerms,
        rows: &[usize],
    ) -> Result<Self> {
        let idx: Vec<usize> = covariates
            .iter()
            .map(|c| {
                ds.covariate_index(c)
                    .ok_or_else(|| contract(format!("unknown covariate `{c}`")))
            })
            .collect::<Result<_>>()?;
        let mut terms = vec![Term::Intercept];
        match learner {
            Learner::InterceptOnly => return Ok(Self { terms }),
            Learner::MainTerms => {
                for &ci in &idx {
                    match &ds.covariates[ci].kind {
                        CovariateKind::Real => terms.push(Term::Real(ci)),
                        CovariateKind::Categorical { levels } => {
                            for lvl in levels.iter().skip(1) {
                                terms.push(Term::Level(ci, lvl.clone()));
                            }
                        }
                    }
                }
            }
            Learner::Saturated => {
                let profiles: BTreeSet<Vec<String>> = rows
                    .iter()
                    .filter_map(|&r| profile(&ds.units[r], &idx))
                    .collect();
                for p in profiles.into_iter().skip(1) {
                    terms.push(Term::Profile(idx.clone(), p));
                }
            }
        }
        if extra.outcome {
            let levels: BTreeSet<&'static str> =
                rows.iter().map(|&r| ds.units[r].y.level_name()).collect();
            for lvl in levels.into_iter().skip(1) {
                let y = match lvl {
                    "0" => Outcome::Zero,
                    "1" => Outcome::One,
                    _ => Outcome::Missing,
                };
                terms.push(Term::Outcome(y));
            }
        }
        if extra.arm {
            let arms: BTreeSet<VaccineId> = rows.iter().map(|&r| ds.units[r].arm).collect();
            for a in arms.into_iter().skip(1) {
                terms.push(Term::Arm(a));
            }
        }
        Ok(Self { terms })
    }

    pub fn ncols(&self) -> usize {
        self.terms.len()
    }

    fn encode(&self, u: &ObservedUnit) -> Result<Vec<f64>> {
        self.terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Intercept => 1.0,
                    Term::Real(ci) => match &u.covariates[*ci] {
                        Some(CovValue::Real(v)) => *v,
                        Some(CovValue::Level(_)) => {
                            return Err(contract("categorical value in a real covariate"))
                        }
                        None => return Err(contract("missing covariate value in design")),
                    },
                    Term::Level(ci, lvl) => match &u.covariates[*ci] {
                        Some(CovValue::Level(s)) => (s == lvl) as u8 as f64,
                        Some(CovValue::Real(_)) => {
                            return Err(contract("real value in a categorical covariate"))
                        }
                        None => return Err(contract("missing covariate value in design")),
                    },
                    Term::Outcome(y) => (u.y == *y) as u8 as f64,
                    Term::Arm(a) => (u.arm == *a) as u8 as f64,
                    Term::Profile(idx, p) => match profile(u, idx) {
                        Some(q) => (&q == p) as u8 as f64,
                        None => return Err(contract("missing covariate value in design")),
                    },
                })
            })
            .collect()
    }

    pub fn matrix(&self, ds: &StackedDataset, rows: &[usize]) -> Result<DesignMatrix> {
        let encoded: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| self.encode(&ds.units[r]))
            .collect::<Result<_>>()?;
        DesignMatrix::from_rows(&encoded, self.ncols())
    }
}

fn profile(u: &ObservedUnit, idx: &[usize]) -> Option<Vec<String>> {
    idx.iter()
        .map(|&i| u.covariates[i].as_ref().map(|v| v.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_stacked_csv, ColumnSchema};

    #[test]
    fn one_hot_with_lexicographic_reference() {
        let text = "trial,arm,delta,s,y,weight,site,age\n\
                    1,1,1,1.0,0,,north,30\n\
                    1,2,1,2.0,1,,east,40\n\
                    1,1,1,3.0,,,south,50\n";
        let ds = read_stacked_csv(text.as_bytes(), &ColumnSchema::default()).unwrap();
        let enc = Encoder::build(
            Learner::MainTerms,
            &ds,
            &["site".into(), "age".into()],
            ExtraTerms {
                outcome: true,
                arm: true,
            },
            &[0, 1, 2],
        )
        .unwrap();
        // intercept, site=north, site=south, age, y=1, y=missing, arm=2
        assert_eq!(enc.ncols(), 7);
        let m = enc.matrix(&ds, &[0, 1, 2]).unwrap();
        let m = m.as_matrix();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0, 30.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 40.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0, 50.0, 0.0, 1.0, 0.0]);
    }
}

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{Outcome, TrialId, VaccineId};
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;

/// Enumeration beyond this many joint atoms is refused.
pub const MAX_ATOMS: usize = 1_000_000;

type WFn = dyn Fn(TrialId, &[i64]) -> f64 + Send + Sync;
type ArmFn = dyn Fn(TrialId, &[i64]) -> Vec<(VaccineId, f64)> + Send + Sync;
type SFn = dyn Fn(TrialId, &[i64], VaccineId) -> Vec<(f64, f64)> + Send + Sync;
type YFn = dyn Fn(TrialId, &[i64], VaccineId, f64) -> f64 + Send + Sync;
type DeltaFn = dyn Fn(TrialId, &[i64], VaccineId, Outcome, f64) -> f64 + Send + Sync;

/// A structural model with finite support.
///
/// Draw order: T, then W | T, then A | T, W, then the potential response
/// S(A) | T, W, then Y | T, W, A, S, then Δ | T, W, A, Y, S. The response
/// distribution is indexed by the assigned arm, so `s_dist(t, w, a)` is the
/// law of S(a) for every unit regardless of the arm it received.
pub struct DiscreteDgp {
    /// Marginal law of T.
    pub trials: Vec<(TrialId, f64)>,
    /// Names of the covariates, matched against the estimand's W_S and W_Δ.
    pub covariates: Vec<String>,
    /// Support of W; each atom lists one level per covariate.
    pub w_support: Vec<Vec<i64>>,
    pub p_w: Box<WFn>,
    pub p_arm: Box<ArmFn>,
    /// (value, probability) pairs.
    pub s_dist: Box<SFn>,
    /// P(Y = 1 | T, W, A, S).
    pub p_y1: Box<YFn>,
    /// P(Δ = 1 | T, W, A, Y, S).
    pub p_delta: Box<DeltaFn>,
}

impl std::fmt::Debug for DiscreteDgp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteDgp")
            .field("trials", &self.trials)
            .field("covariates", &self.covariates)
            .field("w_support", &self.w_support.len())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Identification {
    /// The nested observed-data regression functional.
    pub observed: f64,
    /// E[S(a) | T ∈ T_ref] from the structural equations.
    pub counterfactual: f64,
    pub atoms: usize,
}

struct Atom {
    t: TrialId,
    w: usize,
    arm: VaccineId,
    s: f64,
    y: Outcome,
    delta: bool,
    p: f64,
}

fn project(w: &[i64], idx: &[usize]) -> Vec<i64> {
    idx.iter().map(|&i| w[i]).collect()
}

fn indices(dgp: &DiscreteDgp, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            dgp.covariates
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::Contract(format!("covariate '{n}' is not part of the model")))
        })
        .collect()
}

/// Computes both sides of the identification result by exact summation over
/// the joint support.
pub fn identify_exact(dgp: &DiscreteDgp, spec: &EstimandSpec) -> Result<Identification> {
    let a = spec.vaccine;
    let ws_idx = indices(dgp, &spec.ws)?;
    let wds_idx = indices(dgp, &spec.w_delta_s())?;

    // Size check before enumerating.
    let mut count = 0usize;
    for &(t, _) in &dgp.trials {
        for w in &dgp.w_support {
            for (arm, _) in (dgp.p_arm)(t, w) {
                count += (dgp.s_dist)(t, w, arm).len() * 4;
                if count > MAX_ATOMS {
                    return Err(Error::Resource(format!(
                        "discrete model support exceeds {MAX_ATOMS} atoms"
                    )));
                }
            }
        }
    }

    let mut atoms = Vec::with_capacity(count);
    let mut cf_num = 0.0;
    let mut ref_mass = 0.0;
    for &(t, pt) in &dgp.trials {
        for (wi, w) in dgp.w_support.iter().enumerate() {
            let ptw = pt * (dgp.p_w)(t, w);
            if ptw == 0.0 {
                continue;
            }
            if spec.in_reference(t) {
                ref_mass += ptw;
                let mean_sa: f64 = (dgp.s_dist)(t, w, a).iter().map(|(s, p)| s * p).sum();
                cf_num += ptw * mean_sa;
            }
            for (arm, pa) in (dgp.p_arm)(t, w) {
                for (s, ps) in (dgp.s_dist)(t, w, arm) {
                    let py1 = (dgp.p_y1)(t, w, arm, s);
                    for (y, py) in [(Outcome::One, py1), (Outcome::Zero, 1.0 - py1)] {
                        let pd = (dgp.p_delta)(t, w, arm, y, s);
                        for (delta, pdel) in [(true, pd), (false, 1.0 - pd)] {
                            let p = ptw * pa * ps * py * pdel;
                            if p > 0.0 {
                                atoms.push(Atom {
                                    t,
                                    w: wi,
                                    arm,
                                    s,
                                    y,
                                    delta,
                                    p,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    if ref_mass == 0.0 {
        return Err(Error::Contract("referent trials have zero probability".into()));
    }
    let counterfactual = cf_num / ref_mass;

    let vacc = |at: &Atom| at.arm == a && spec.in_evaluation(at.t);

    // Innermost regression: E(S | Δ=1, A=a, T∈T_a, Y, W_ΔS).
    let mut q2: BTreeMap<(Vec<i64>, u8), (f64, f64)> = BTreeMap::new();
    for at in atoms.iter().filter(|at| vacc(at) && at.delta) {
        let key = (project(&dgp.w_support[at.w], &wds_idx), at.y as u8);
        let e = q2.entry(key).or_insert((0.0, 0.0));
        e.0 += at.p * at.s;
        e.1 += at.p;
    }
    // Middle regression: E(Q̄₂ | A=a, T∈T_a, W_S).
    let mut q1: BTreeMap<Vec<i64>, (f64, f64)> = BTreeMap::new();
    for at in atoms.iter().filter(|at| vacc(at)) {
        let w = &dgp.w_support[at.w];
        let key2 = (project(w, &wds_idx), at.y as u8);
        let (num, den) = q2.get(&key2).copied().ok_or_else(|| {
            Error::Estimation(format!(
                "sampling positivity fails at W_ΔS={:?}, Y={}",
                key2.0,
                at.y.level_name()
            ))
        })?;
        let e = q1.entry(project(w, &ws_idx)).or_insert((0.0, 0.0));
        e.0 += at.p * num / den;
        e.1 += at.p;
    }
    // Outer average over the referent population.
    let mut obs_num = 0.0;
    for &(t, pt) in dgp.trials.iter().filter(|(t, _)| spec.in_reference(*t)) {
        for w in &dgp.w_support {
            let ptw = pt * (dgp.p_w)(t, w);
            if ptw == 0.0 {
                continue;
            }
            let key = project(w, &ws_idx);
            let (num, den) = q1.get(&key).copied().ok_or_else(|| {
                Error::Estimation(format!("vaccine positivity fails at W_S={key:?}"))
            })?;
            obs_num += ptw * num / den;
        }
    }
    Ok(Identification {
        observed: obs_num / ref_mass,
        counterfactual,
        atoms: atoms.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(delta_on_s: bool) -> DiscreteDgp {
        DiscreteDgp {
            trials: vec![(TrialId(1), 0.4), (TrialId(2), 0.6)],
            covariates: vec!["w".into()],
            w_support: vec![vec![0], vec![1]],
            p_w: Box::new(|t, w| {
                let p1 = if t == TrialId(1) { 0.3 } else { 0.7 };
                if w[0] == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            }),
            p_arm: Box::new(|t, _| {
                vec![(VaccineId(t.0), 0.5), (VaccineId(3), 0.5)]
            }),
            s_dist: Box::new(|_, w, a| {
                let shift = if a == VaccineId(3) { 0.0 } else { 2.0 };
                let base = w[0] as f64 + shift;
                vec![(base - 1.0, 0.5), (base + 1.0, 0.5)]
            }),
            p_y1: Box::new(|_, _, _, s| 1.0 / (1.0 + (2.0 + 0.5 * s).exp())),
            p_delta: Box::new(move |_, _, _, y, s| {
                if delta_on_s {
                    if s > 1.5 {
                        0.9
                    } else {
                        0.1
                    }
                } else if y == Outcome::One {
                    0.9
                } else {
                    0.2
                }
            }),
        }
    }

    fn spec() -> EstimandSpec {
        let mut s = EstimandSpec::new(
            VaccineId(1),
            BTreeSet::from([TrialId(2)]),
            BTreeSet::from([TrialId(1)]),
        );
        s.ws = vec!["w".into()];
        s
    }

    #[test]
    fn functional_equals_counterfactual_under_assumptions() {
        let r = identify_exact(&toy(false), &spec()).unwrap();
        // E[S(1)|T=2] = 0.7·1 + 2 = 2.7
        assert!((r.counterfactual - 2.7).abs() < 1e-12);
        assert!((r.observed - r.counterfactual).abs() < 1e-12);
    }

    #[test]
    fn sampling_on_response_breaks_identification() {
        let r = identify_exact(&toy(true), &spec()).unwrap();
        assert!((r.observed - r.counterfactual).abs() > 1e-3);
    }

    #[test]
    fn oversized_support_is_refused() {
        let mut dgp = toy(false);
        dgp.s_dist = Box::new(|_, _, _| (0..200_000).map(|k| (k as f64, 1.0 / 200_000.0)).collect());
        assert!(matches!(identify_exact(&dgp, &spec()), Err(Error::Resource(_))));
    }
}

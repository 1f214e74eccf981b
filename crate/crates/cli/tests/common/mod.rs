//! Synthetic stacked data shaped like a three-trial HIV vaccine comparison:
//! a large case-control-sampled efficacy trial and a smaller
//! immunogenicity trial of vaccine 1, a third trial of vaccine 2, shared
//! placebo label 0, five baseline covariates and three antigens each read
//! out as a positivity call and a magnitude.

#![allow(dead_code)]

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub const ANTIGENS: [&str; 3] = ["zm96", "tv1", "a1086"];
pub const COVARIATES: [&str; 5] = ["age", "sex", "bmi", "region", "education"];

struct Trial {
    id: i64,
    vaccine: i64,
    n_vaccine: usize,
    n_placebo: usize,
    mean_age: f64,
    p_female: f64,
    mean_bmi: f64,
    regions: [f64; 3],
    p_secondary: f64,
    case_control: bool,
}

const TRIALS: [Trial; 3] = [
    Trial {
        id: 702,
        vaccine: 1,
        n_vaccine: 600,
        n_placebo: 600,
        mean_age: 26.0,
        p_female: 0.7,
        mean_bmi: 27.0,
        regions: [0.5, 0.3, 0.2],
        p_secondary: 0.55,
        case_control: true,
    },
    Trial {
        id: 100,
        vaccine: 1,
        n_vaccine: 180,
        n_placebo: 30,
        mean_age: 23.0,
        p_female: 0.45,
        mean_bmi: 25.0,
        regions: [0.3, 0.4, 0.3],
        p_secondary: 0.7,
        case_control: false,
    },
    Trial {
        id: 97,
        vaccine: 2,
        n_vaccine: 80,
        n_placebo: 20,
        mean_age: 30.0,
        p_female: 0.5,
        mean_bmi: 26.0,
        regions: [0.2, 0.3, 0.5],
        p_secondary: 0.6,
        case_control: false,
    },
];

const REGIONS: [&str; 3] = ["cape", "gauteng", "natal"];
/// Probability that a non-case of the case-control trial has its response
/// measured; every case is measured.
pub const CONTROL_SAMPLING: f64 = 0.25;

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The CSV text for `seed`. Column layout: trial, arm, delta, weight, y,
/// the covariates, then `<antigen>_pos` and `<antigen>_mag` per antigen.
pub fn synthetic_stacked_csv(seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = String::from("trial,arm,delta,weight,y,age,sex,bmi,region,education");
    for a in ANTIGENS {
        let _ = write!(out, ",{a}_pos,{a}_mag");
    }
    out.push('\n');
    for t in &TRIALS {
        let arms = std::iter::repeat_n(t.vaccine, t.n_vaccine).chain(std::iter::repeat_n(0, t.n_placebo));
        for arm in arms {
            let age = (t.mean_age + 5.0 * normal(&mut rng)).clamp(18.0, 45.0).round();
            let female = rng.random::<f64>() < t.p_female;
            let bmi = ((t.mean_bmi + 4.0 * normal(&mut rng)).clamp(16.0, 45.0) * 10.0).round() / 10.0;
            let u: f64 = rng.random();
            let region = if u < t.regions[0] {
                0
            } else if u < t.regions[0] + t.regions[1] {
                1
            } else {
                2
            };
            let secondary = rng.random::<f64>() < t.p_secondary;

            let mut responses = Vec::with_capacity(ANTIGENS.len());
            for (k, _) in ANTIGENS.iter().enumerate() {
                let vaccine_effect = match arm {
                    0 => -2.0,
                    1 => 0.3 - 0.25 * k as f64,
                    _ => 0.5,
                };
                let z = vaccine_effect - 0.04 * (age - 25.0) + if female { 0.3 } else { 0.0 }
                    - 0.03 * (bmi - 26.0)
                    + 0.25 * region as f64
                    + if secondary { 0.2 } else { 0.0 }
                    + normal(&mut rng);
                let magnitude = 10f64.powf(-1.15 + 0.2 * z);
                responses.push((z, (z > -0.4) as u8, magnitude));
            }

            let (y, delta, weight) = if t.case_control {
                let eta = -2.2 - 0.5 * responses[2].0 + 0.02 * (age - 25.0);
                let case = rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp());
                let p = if case { 1.0 } else { CONTROL_SAMPLING };
                let delta = rng.random::<f64>() < p;
                (if case { "1" } else { "0" }, delta, format!("{p}"))
            } else {
                ("", true, String::new())
            };

            let _ = write!(
                out,
                "{},{arm},{},{weight},{y},{age},{},{bmi:.1},{},{}",
                t.id,
                delta as u8,
                if female { "F" } else { "M" },
                REGIONS[region],
                if secondary { "secondary" } else { "primary" },
            );
            for (_, pos, mag) in &responses {
                if delta {
                    let _ = write!(out, ",{pos},{mag:.5}");
                } else {
                    out.push_str(",,");
                }
            }
            out.push('\n');
        }
    }
    out
}

/// `estimate` arguments producing the full comparison table for the
/// synthetic data: RR and GM for every antigen, vaccine 1 against 2,
/// standardized to the case-control trial.
pub fn estimate_args(input: &str, out: &str) -> Vec<String> {
    let mut args: Vec<String> = [
        "xtrial", "estimate", "--input", input, "--vaccine", "1,2", "--ref-trials", "702",
        "--ws", "age,sex,bmi,region,education", "--out", out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for a in ANTIGENS {
        let label = a.trim_start_matches('a').to_uppercase();
        args.push("--response".into());
        args.push(format!("{label}:{a}_pos:binary"));
        args.push("--response".into());
        args.push(format!("{label}:{a}_mag:log10"));
    }
    args
}

//! Covariate-standardized comparisons of vaccine immunogenicity across
//! trials.
//!
//! Stacked data from several trials are used to estimate the mean immune
//! response a vaccine would have produced in a referent trial population,
//! with targeted minimum loss estimation handling covariate shift between
//! trials and two-phase sampling of the response within trials.
//!
//! ```no_run
//! use xtrial::{load_stacked_csv, run_tmle, ColumnSchema, EstimandSpec, TmleOptions};
//! use xtrial::{TrialId, VaccineId};
//!
//! let ds = load_stacked_csv("stacked.csv".as_ref(), &ColumnSchema::default())?;
//! let spec = EstimandSpec::for_dataset(&ds, VaccineId(1), [TrialId(2)]).with_ws(&["age", "sex"]);
//! let est = run_tmle(&ds, &spec, &TmleOptions::default())?;
//! println!("{:.3} ({:.3}, {:.3})", est.psi, est.ci.0, est.ci.1);
//! # Ok::<(), xtrial::Error>(())
//! ```

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrasts;
pub mod data;
pub mod design;
pub mod error;
pub mod estimand;
pub mod glm;
pub mod normal;
pub mod nuisance;
pub mod sim;
pub mod stats;
pub mod tmle;
pub mod validate;

pub use contrasts::{contrast_difference, contrast_geomean_ratio, wald_test, ContrastKind, ContrastResult};
pub use data::{
    load_stacked_csv, read_stacked_csv, ColumnSchema, CovValue, Design, ObservedUnit, Outcome,
    RegistryOverride, StackedDataset, TrialId, VaccineId,
};
pub use design::Learner;
pub use error::{Error, Result};
pub use estimand::{EstimandSpec, OutcomeScale, Truncation};
pub use nuisance::GDeltaMode;
pub use tmle::{estimate_unadjusted, run_tmle, EstimateResult, Estimator, TmleOptions};
pub use validate::{validate, ValidationReport};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

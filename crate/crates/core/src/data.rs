//! Stacked multi-trial datasets.
//!
//! One row per participant across every pooled trial. A row carries the trial
//! label, the vaccine (or control) received, baseline covariates, the sampling
//! indicator for the immune-response measurement, the response itself when it
//! was measured, and the clinical outcome (which early-phase trials usually
//! lack).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trial label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialId(pub i64);

/// Vaccine label. Control arms get labels too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VaccineId(pub i64);

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for VaccineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single covariate cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovValue {
    Real(f64),
    Level(String),
}

impl fmt::Display for CovValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovValue::Real(v) => write!(f, "{v}"),
            CovValue::Level(s) => f.write_str(s),
        }
    }
}

/// Clinical outcome, with missingness as its own level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Zero,
    One,
    Missing,
}

impl Outcome {
    /// Level name used when the outcome is one-hot expanded. Sorting these
    /// names lexicographically gives the reference level.
    pub fn level_name(self) -> &'static str {
        match self {
            Outcome::Zero => "0",
            Outcome::One => "1",
            Outcome::Missing => "missing",
        }
    }

    pub fn from_binary(y: bool) -> Self {
        if y {
            Outcome::One
        } else {
            Outcome::Zero
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedUnit {
    pub trial: TrialId,
    pub arm: VaccineId,
    /// Aligned with [`StackedDataset::covariates`]; `None` is missing.
    pub covariates: Vec<Option<CovValue>>,
    pub delta: bool,
    /// Present iff `delta` is set.
    pub s: Option<f64>,
    pub y: Outcome,
    pub weight_known: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    AllSampled,
    TwoPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub collected: BTreeSet<String>,
    pub vaccines: BTreeSet<VaccineId>,
    pub design: Design,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateKind {
    Real,
    /// Levels sorted lexicographically; the first is the reference level.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedDataset {
    pub covariates: Vec<CovariateColumn>,
    pub units: Vec<ObservedUnit>,
    pub registry: BTreeMap<TrialId, TrialInfo>,
}

impl StackedDataset {
    /// Assembles a dataset and infers the trial registry from the units.
    pub fn new(covariates: Vec<CovariateColumn>, units: Vec<ObservedUnit>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate `{}`", c.name)));
            }
        }
        for (i, u) in units.iter().enumerate() {
            if u.covariates.len() != covariates.len() {
                return Err(Error::Contract(format!(
                    "unit {i} has {} covariate cells, expected {}",
                    u.covariates.len(),
                    covariates.len()
                )));
            }
            if !u.delta && u.s.is_some() {
                return Err(Error::Contract(format!("unit {i} has delta=0 but a recorded s")));
            }
            if u.delta && u.s.is_none() {
                return Err(Error::Domain(format!("unit {i} has delta=1 but no s value")));
            }
            if let Some(w) = u.weight_known {
                if !(w > 0.0 && w <= 1.0) {
                    return Err(Error::Domain(format!(
                        "unit {i} has known sampling weight {w} outside (0,1]"
                    )));
                }
            }
        }
        let registry = infer_registry(&covariates, &units);
        Ok(Self {
            covariates,
            units,
            registry,
        })
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn trials(&self) -> BTreeSet<TrialId> {
        self.registry.keys().copied().collect()
    }

    pub fn vaccines(&self) -> BTreeSet<VaccineId> {
        self.registry
            .values()
            .flat_map(|t| t.vaccines.iter().copied())
            .collect()
    }

    /// Trials in which `vaccine` was administered to at least one unit.
    pub fn trials_with_vaccine(&self, vaccine: VaccineId) -> BTreeSet<TrialId> {
        self.registry
            .iter()
            .filter(|(_, info)| info.vaccines.contains(&vaccine))
            .map(|(t, _)| *t)
            .collect()
    }

    /// Replaces designs and collected-covariate sets for the trials named in
    /// `overrides`. Invariant violations this introduces are reported by
    /// [`validate`], not here.
    pub fn apply_registry_override(&mut self, overrides: &RegistryOverride) -> Result<()> {
        for (trial, ov) in &overrides.trials {
            let info = self.registry.get_mut(trial).ok_or_else(|| {
                Error::Schema(format!("registry override names unknown trial {trial}"))
            })?;
            if let Some(design) = ov.design {
                info.design = design;
            }
            if let Some(covs) = &ov.covariates {
                for c in covs {
                    if self.covariates.iter().all(|col| &col.name != c) {
                        return Err(Error::Schema(format!(
                            "registry override for trial {trial} names unknown covariate `{c}`"
                        )));
                    }
                }
                info.collected = covs.iter().cloned().collect();
            }
        }
        Ok(())
    }

    /// Same dataset with the immune response passed through `f` on every
    /// measured unit.
    pub fn map_response(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for u in &mut out.units {
            u.s = u.s.map(&f);
        }
        out
    }

    /// Serializes to the stacked CSV layout read by [`load_stacked_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec!["trial", "arm", "delta", "s", "y", "weight"];
        header.extend(self.covariates.iter().map(|c| c.name.as_str()));
        w.write_record(&header)?;
        for u in &self.units {
            let mut rec = vec![
                u.trial.to_string(),
                u.arm.to_string(),
                if u.delta { "1".into() } else { "0".into() },
                u.s.map(|v| v.to_string()).unwrap_or_default(),
                match u.y {
                    Outcome::Zero => "0".into(),
                    Outcome::One => "1".into(),
                    Outcome::Missing => String::new(),
                },
                u.weight_known.map(|v| v.to_string()).unwrap_or_default(),
            ];
            rec.extend(
                u.covariates
                    .iter()
                    .map(|c| c.as_ref().map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

fn infer_registry(
    covariates: &[CovariateColumn],
    units: &[ObservedUnit],
) -> BTreeMap<TrialId, TrialInfo> {
    let mut reg: BTreeMap<TrialId, TrialInfo> = BTreeMap::new();
    for u in units {
        let info = reg.entry(u.trial).or_insert_with(|| TrialInfo {
            collected: BTreeSet::new(),
            vaccines: BTreeSet::new(),
            design: Design::AllSampled,
        });
        info.vaccines.insert(u.arm);
        if !u.delta {
            info.design = Design::TwoPhase;
        }
        for (col, cell) in covariates.iter().zip(&u.covariates) {
            if cell.is_some() {
                info.collected.insert(col.name.clone());
            }
        }
    }
    reg
}

/// Column mapping for [`load_stacked_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub trial: String,
    pub arm: String,
    pub delta: String,
    pub s: String,
    pub y: String,
    pub weight: String,
    /// Covariate columns; `None` takes every column not mapped above.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            trial: "trial".into(),
            arm: "arm".into(),
            delta: "delta".into(),
            s: "s".into(),
            y: "y".into(),
            weight: "weight".into(),
            covariates: None,
        }
    }
}

impl ColumnSchema {
    /// Default layout but reading the immune response from `column`.
    pub fn with_response(column: &str) -> Self {
        Self {
            s: column.to_string(),
            ..Self::default()
        }
    }
}

/// Per-trial registry corrections, read from JSON:
/// `{"trials": {"1": {"design": "all-sampled", "covariates": ["age"]}}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryOverride {
    pub trials: BTreeMap<TrialId, TrialOverride>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialOverride {
    #[serde(default)]
    pub design: Option<Design>,
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

impl RegistryOverride {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn load_stacked_csv(path: &Path, schema: &ColumnSchema) -> Result<StackedDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_stacked_csv(file, schema)
}

/// Reader-based variant of [`load_stacked_csv`].
pub fn read_stacked_csv<R: Read>(reader: R, schema: &ColumnSchema) -> Result<StackedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let mut seen = HashSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            return Err(Error::Schema(format!("duplicate column name `{h}`")));
        }
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))
    };
    let i_trial = find(&schema.trial)?;
    let i_arm = find(&schema.arm)?;
    let i_delta = find(&schema.delta)?;
    let i_s = find(&schema.s)?;
    let i_y = find(&schema.y)?;
    let i_w = headers.iter().position(|h| h == &schema.weight);
    let mapped = [
        &schema.trial,
        &schema.arm,
        &schema.delta,
        &schema.s,
        &schema.y,
        &schema.weight,
    ];

    let cov_names: Vec<String> = match &schema.covariates {
        Some(list) => {
            for c in list {
                find(c)?;
            }
            list.clone()
        }
        None => headers
            .iter()
            .filter(|h| !mapped.contains(h))
            .cloned()
            .collect(),
    };
    let cov_idx: Vec<usize> = cov_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;

    // A covariate column is real when every non-empty cell parses as a number.
    let mut kinds = Vec::with_capacity(cov_idx.len());
    for &ci in &cov_idx {
        let cells: Vec<&str> = records
            .iter()
            .map(|r| r.get(ci).unwrap_or(""))
            .filter(|c| !c.is_empty())
            .collect();
        if cells.iter().all(|c| c.parse::<f64>().is_ok()) {
            kinds.push(CovariateKind::Real);
        } else {
            let levels: BTreeSet<String> = cells.iter().map(|c| c.to_string()).collect();
            kinds.push(CovariateKind::Categorical {
                levels: levels.into_iter().collect(),
            });
        }
    }

    let mut units = Vec::with_capacity(records.len());
    for (r, rec) in records.iter().enumerate() {
        let row = r + 1;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let parse_int = |i: usize| -> Result<i64> {
            let c = cell(i);
            c.parse::<i64>()
                .or_else(|_| match c.parse::<f64>() {
                    Ok(v) if v.fract() == 0.0 && v.is_finite() => Ok(v as i64),
                    _ => Err(()),
                })
                .map_err(|_| Error::Parse {
                    row,
                    column: headers[i].clone(),
                    message: format!("expected an integer label, found `{c}`"),
                })
        };
        let parse_real = |i: usize| -> Result<Option<f64>> {
            let c = cell(i);
            if c.is_empty() {
                return Ok(None);
            }
            match c.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(Error::Parse {
                    row,
                    column: headers[i].clone(),
                    message: format!("malformed numeric value `{c}`"),
                }),
            }
        };

        let trial = TrialId(parse_int(i_trial)?);
        let arm = VaccineId(parse_int(i_arm)?);
        let delta = match parse_real(i_delta)? {
            Some(0.0) => false,
            Some(1.0) => true,
            other => {
                return Err(Error::Domain(format!(
                    "row {row}: delta must be 0 or 1, found {}",
                    other.map(|v| v.to_string()).unwrap_or_else(|| "empty".into())
                )))
            }
        };
        let s = if delta {
            match parse_real(i_s)? {
                Some(v) => Some(v),
                None => {
                    return Err(Error::Domain(format!(
                        "row {row}: delta=1 but column `{}` is empty",
                        headers[i_s]
                    )))
                }
            }
        } else {
            None
        };
        let y = match parse_real(i_y)? {
            None => Outcome::Missing,
            Some(0.0) => Outcome::Zero,
            Some(1.0) => Outcome::One,
            Some(v) => {
                return Err(Error::Domain(format!(
                    "row {row}: y must be 0, 1 or empty, found {v}"
                )))
            }
        };
        let weight_known = match i_w {
            Some(i) => match parse_real(i)? {
                Some(w) if w > 0.0 && w <= 1.0 => Some(w),
                Some(w) => {
                    return Err(Error::Domain(format!(
                        "row {row}: sampling weight {w} outside (0,1]"
                    )))
                }
                None => None,
            },
            None => None,
        };
        let covariates = cov_idx
            .iter()
            .zip(&kinds)
            .map(|(&ci, kind)| -> Result<Option<CovValue>> {
                let c = cell(ci);
                if c.is_empty() {
                    return Ok(None);
                }
                Ok(Some(match kind {
                    CovariateKind::Real => CovValue::Real(parse_real(ci)?.unwrap_or(f64::NAN)),
                    CovariateKind::Categorical { .. } => CovValue::Level(c.to_string()),
                }))
            })
            .collect::<Result<Vec<_>>>()?;

        units.push(ObservedUnit {
            trial,
            arm,
            covariates,
            delta,
            s,
            y,
            weight_known,
        });
    }

    let columns = cov_names
        .into_iter()
        .zip(kinds)
        .map(|(name, kind)| CovariateColumn { name, kind })
        .collect();
    StackedDataset::new(columns, units)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimand::OutcomeScale;

pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    AffineToUnit,
    Log10ThenAffine,
}

/// Map from the reporting scale onto the unit interval where the logistic
/// fluctuations operate: u = (s − a_min) / (a_max − a_min), with s replaced
/// by log10(s) for the log kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTransform {
    pub kind: TransformKind,
    pub a_min: f64,
    pub a_max: f64,
}

impl OutcomeTransform {
    pub fn identity() -> Self {
        Self {
            kind: TransformKind::Identity,
            a_min: 0.0,
            a_max: 1.0,
        }
    }

    /// Raw response to the unit scale.
    pub fn forward(&self, s: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => s,
            TransformKind::AffineToUnit => (s - self.a_min) / (self.a_max - self.a_min),
            TransformKind::Log10ThenAffine => (s.log10() - self.a_min) / (self.a_max - self.a_min),
        }
    }

    /// Unit scale back to the reporting scale (log10 scale for the log kind).
    pub fn inverse(&self, u: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => u,
            _ => self.a_min + u * (self.a_max - self.a_min),
        }
    }

    /// d(reporting)/d(unit); influence functions scale by this.
    pub fn slope(&self) -> f64 {
        match self.kind {
            TransformKind::Identity => 1.0,
            _ => self.a_max - self.a_min,
        }
    }
}

/// Rescales measured responses into (0,1).
///
/// The affine map uses the observed range widened by `margin` of the range
/// on each side. With `margin = None`, responses already inside (0,1) on the
/// identity scale are left untouched and anything else maps min/max to 0/1.
/// Binary responses always use the fixed guard map (−0.05, 1.05).
pub fn scale_outcome(
    s: &[f64],
    scale: OutcomeScale,
    margin: Option<f64>,
) -> Result<(Vec<f64>, OutcomeTransform)> {
    let transform = fit_transform(s, scale, margin)?;
    Ok((s.iter().map(|&v| transform.forward(v)).collect(), transform))
}

pub fn fit_transform(s: &[f64], scale: OutcomeScale, margin: Option<f64>) -> Result<OutcomeTransform> {
    if s.is_empty() {
        return Err(Error::Domain("no measured responses to scale".into()));
    }
    match scale {
        OutcomeScale::Binary => {
            if let Some(bad) = s.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Domain(format!(
                    "binary scale requested but response {} is not 0/1",
                    s[bad]
                )));
            }
            Ok(OutcomeTransform {
                kind: TransformKind::AffineToUnit,
                a_min: -0.05,
                a_max: 1.05,
            })
        }
        OutcomeScale::Identity | OutcomeScale::Log10 => {
            let values: Vec<f64> = if scale == OutcomeScale::Log10 {
                let bad: Vec<usize> = (0..s.len()).filter(|&i| !(s[i] > 0.0)).collect();
                if !bad.is_empty() {
                    return Err(Error::Domain(format!(
                        "log10 scale requires positive responses; offending measured rows (0-based): {bad:?}"
                    )));
                }
                s.iter().map(|v| v.log10()).collect()
            } else {
                s.to_vec()
            };
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::Domain(format!(
                    "immune responses have a degenerate range [{lo}, {hi}]"
                )));
            }
            let kind = if scale == OutcomeScale::Log10 {
                TransformKind::Log10ThenAffine
            } else {
                TransformKind::AffineToUnit
            };
            match margin {
                None if scale == OutcomeScale::Identity && lo > 0.0 && hi < 1.0 => {
                    Ok(OutcomeTransform::identity())
                }
                None => Ok(OutcomeTransform {
                    kind,
                    a_min: lo,
                    a_max: hi,
                }),
                Some(m) => {
                    let pad = m * (hi - lo);
                    Ok(OutcomeTransform {
                        kind,
                        a_min: lo - pad,
                        a_max: hi + pad,
                    })
                }
            }
        }
    }
}

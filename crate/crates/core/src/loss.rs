//! Loss-factor estimates and the unit classes that pair them with participations.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::uncertain::Uncertain;

/// Unit carried by a participation. The matching loss factor makes `p·Γ`
/// dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParticipationUnit {
    #[serde(rename = "dimensionless")]
    Dimensionless,
    /// Admittance per unit length (seams and film joints).
    #[serde(rename = "S/m", alias = "S_per_m")]
    SiemensPerMeter,
    /// Inverse geometric factor of conductor loss.
    #[serde(rename = "1/Ω", alias = "1/ohm", alias = "per_ohm")]
    PerOhm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossUnit {
    #[serde(rename = "dimensionless")]
    Dimensionless,
    /// Inverse conductance per unit length.
    #[serde(rename = "Ω·m", alias = "ohm_m", alias = "ohm*m")]
    OhmMeter,
    /// Surface resistance.
    #[serde(rename = "Ω", alias = "ohm")]
    Ohm,
}

impl ParticipationUnit {
    pub fn loss_unit(self) -> LossUnit {
        match self {
            ParticipationUnit::Dimensionless => LossUnit::Dimensionless,
            ParticipationUnit::SiemensPerMeter => LossUnit::OhmMeter,
            ParticipationUnit::PerOhm => LossUnit::Ohm,
        }
    }
}

impl fmt::Display for ParticipationUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParticipationUnit::Dimensionless => "dimensionless",
            ParticipationUnit::SiemensPerMeter => "S/m",
            ParticipationUnit::PerOhm => "1/Ω",
        })
    }
}

impl fmt::Display for LossUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossUnit::Dimensionless => "dimensionless",
            LossUnit::OhmMeter => "Ω·m",
            LossUnit::Ohm => "Ω",
        })
    }
}

/// Where a loss factor came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Provenance {
    /// Inverted from a participation matrix in this analysis.
    Solved,
    /// Taken from another device or measurement.
    Transferred(String),
    /// Whole residual loss of a mode attributed to a single mechanism.
    Remainder,
    /// Sample average over several solved devices.
    Averaged(usize),
    /// Combined from several transferred values.
    Combined,
}

impl From<Provenance> for String {
    fn from(p: Provenance) -> String {
        match p {
            Provenance::Solved => "solved".into(),
            Provenance::Transferred(src) => format!("transferred:{src}"),
            Provenance::Remainder => "remainder".into(),
            Provenance::Averaged(n) => format!("averaged:{n}"),
            Provenance::Combined => "combined".into(),
        }
    }
}

impl TryFrom<String> for Provenance {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        match s.as_str() {
            "solved" => Ok(Provenance::Solved),
            "remainder" => Ok(Provenance::Remainder),
            "combined" => Ok(Provenance::Combined),
            _ => {
                if let Some(src) = s.strip_prefix("transferred:") {
                    Ok(Provenance::Transferred(src.to_string()))
                } else if s == "transferred" {
                    Ok(Provenance::Transferred(String::new()))
                } else if let Some(n) = s.strip_prefix("averaged:") {
                    n.parse().map(Provenance::Averaged).map_err(|e| format!("bad average count: {e}"))
                } else {
                    Err(format!("unknown provenance {s:?}"))
                }
            }
        }
    }
}

/// A loss factor `Γ` with uncertainty, or an upper bound when the central
/// value is not resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFactorEstimate {
    pub label: String,
    /// Central estimate. Retained for bounded entries, where it may be ≤ 0.
    pub value: f64,
    pub sigma: f64,
    #[serde(default)]
    pub bound: Option<f64>,
    pub unit: LossUnit,
    pub source: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl LossFactorEstimate {
    pub fn new(label: impl Into<String>, value: f64, sigma: f64, unit: LossUnit, source: Provenance) -> Self {
        Self {
            label: label.into(),
            value,
            sigma,
            bound: None,
            unit,
            source,
            notes: Vec::new(),
        }
    }

    pub fn transferred(label: impl Into<String>, value: f64, sigma: f64, unit: LossUnit, source: &str) -> Self {
        Self::new(label, value, sigma, unit, Provenance::Transferred(source.into()))
    }

    pub fn is_bounded(&self) -> bool {
        self.bound.is_some()
    }

    pub fn estimate(&self) -> Uncertain {
        Uncertain::new(self.value, self.sigma)
    }

    /// The bound for bounded entries, otherwise the central value.
    pub fn worst_case(&self) -> f64 {
        self.bound.unwrap_or(self.value)
    }

    pub fn check_unit(&self, participation: ParticipationUnit) -> Result<()> {
        if participation.loss_unit() == self.unit {
            Ok(())
        } else {
            Err(Error::UnitMismatch {
                label: self.label.clone(),
                detail: format!("participation in {participation} needs a loss factor in {}, got {}", participation.loss_unit(), self.unit),
            })
        }
    }
}

impl fmt::Display for LossFactorEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bound {
            Some(b) => write!(f, "{}: < {:.3e} {}", self.label, b, self.unit),
            None => write!(f, "{}: {:.3e} ± {:.2e} {}", self.label, self.value, self.sigma, self.unit),
        }
    }
}

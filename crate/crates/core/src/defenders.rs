//! Certification (`v`) and warning (`w`) functions over a mutant profile.
//!
//! Every decision here is a pure function of a [`MutantProfile`]: the
//! prediction for the unmasked input plus one prediction per mask. All
//! threshold comparisons are strict, so a confidence exactly equal to `tau`
//! never certifies through the low-confidence branch and never warns
//! through it either. Empty-set conventions (`max {} = -inf`,
//! `min {} = +inf`) are explicit branches rather than sentinel floats.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::Prediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutantProfile {
    pub base: Prediction,
    pub mutants: Vec<Prediction>,
}

impl MutantProfile {
    pub fn new(base: Prediction, mutants: Vec<Prediction>) -> Self {
        Self { base, mutants }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DefenderError {
    #[error("tau {0} outside [0, 1]")]
    Tau(f64),
    #[error("{0} has no warning function")]
    WarnUnsupported(DefenderKind),
    #[error("unknown defender {0:?}")]
    UnknownKind(String),
    #[error("cannot parse defender {0:?}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenderKind {
    Doma,
    #[serde(alias = "c2")]
    C2Variant,
    Pgpp,
    Hicert,
    HicertFlip,
    PgppFlip,
}

impl DefenderKind {
    pub const ALL: [DefenderKind; 6] = [
        DefenderKind::Doma,
        DefenderKind::C2Variant,
        DefenderKind::Pgpp,
        DefenderKind::Hicert,
        DefenderKind::HicertFlip,
        DefenderKind::PgppFlip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefenderKind::Doma => "doma",
            DefenderKind::C2Variant => "c2_variant",
            DefenderKind::Pgpp => "pgpp",
            DefenderKind::Hicert => "hicert",
            DefenderKind::HicertFlip => "hicert_flip",
            DefenderKind::PgppFlip => "pgpp_flip",
        }
    }

    pub fn has_warning(self) -> bool {
        !matches!(self, DefenderKind::HicertFlip | DefenderKind::PgppFlip)
    }

    pub fn uses_tau(self) -> bool {
        !matches!(self, DefenderKind::Doma | DefenderKind::C2Variant)
    }
}

impl fmt::Display for DefenderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefenderKind {
    type Err = DefenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "doma" => Ok(DefenderKind::Doma),
            "c2" | "c2_variant" => Ok(DefenderKind::C2Variant),
            "pgpp" => Ok(DefenderKind::Pgpp),
            "hicert" => Ok(DefenderKind::Hicert),
            "hicert_flip" => Ok(DefenderKind::HicertFlip),
            "pgpp_flip" => Ok(DefenderKind::PgppFlip),
            other => Err(DefenderError::UnknownKind(other.to_owned())),
        }
    }
}

/// A defender kind with its threshold. Serialized as
/// `{"defender": "hicert", "tau": 0.8}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenderSpec {
    #[serde(rename = "defender")]
    pub kind: DefenderKind,
    #[serde(default)]
    pub tau: f64,
}

impl DefenderSpec {
    pub fn new(kind: DefenderKind, tau: f64) -> Result<Self, DefenderError> {
        let spec = Self { kind, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DefenderError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(DefenderError::Tau(self.tau));
        }
        Ok(())
    }

    pub fn certify(&self, profile: &MutantProfile, true_label: usize) -> bool {
        let tau = self.tau;
        match self.kind {
            DefenderKind::Doma => doma_certify(profile, true_label),
            DefenderKind::C2Variant => c2_certify(profile),
            DefenderKind::Pgpp => pgpp_certify(profile, true_label, tau),
            DefenderKind::Hicert => hicert_certify(profile, true_label, tau),
            DefenderKind::HicertFlip => hicert_flip_certify(profile, true_label, tau),
            DefenderKind::PgppFlip => pgpp_flip_certify(profile, true_label, tau),
        }
    }

    pub fn warn(&self, profile: &MutantProfile) -> Result<bool, DefenderError> {
        match self.kind {
            DefenderKind::Doma | DefenderKind::C2Variant => Ok(doma_warn(profile)),
            DefenderKind::Pgpp => Ok(pgpp_warn(profile, self.tau)),
            DefenderKind::Hicert => Ok(hicert_warn(profile, self.tau)),
            kind => Err(DefenderError::WarnUnsupported(kind)),
        }
    }

    pub fn verdict(&self, profile: &MutantProfile, true_label: usize) -> Result<Verdict, DefenderError> {
        Ok(Verdict {
            certified: self.certify(profile, true_label),
            warned: self.warn(profile)?,
        })
    }
}

impl fmt::Display for DefenderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.uses_tau() {
            write!(f, "{}:{}", self.kind, self.tau)
        } else {
            write!(f, "{}", self.kind)
        }
    }
}

impl FromStr for DefenderSpec {
    type Err = DefenderError;

    /// `kind` or `kind:tau`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, tau) = match s.split_once(':') {
            Some((k, t)) => (
                k.trim(),
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| DefenderError::Parse(s.to_owned()))?,
            ),
            None => (s.trim(), 0.0),
        };
        DefenderSpec::new(kind.parse()?, tau)
    }
}

/// A certification function paired with a (possibly different) warning
/// function. Mismatched pairs are unsound and serve as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defender {
    pub certify: DefenderSpec,
    pub warn: DefenderSpec,
}

impl Defender {
    pub fn composite(certify: DefenderSpec, warn: DefenderSpec) -> Self {
        Self { certify, warn }
    }

    pub fn is_composite(&self) -> bool {
        self.certify != self.warn
    }

    pub fn certify(&self, profile: &MutantProfile, true_label: usize) -> bool {
        self.certify.certify(profile, true_label)
    }

    pub fn warn(&self, profile: &MutantProfile) -> Result<bool, DefenderError> {
        self.warn.warn(profile)
    }

    pub fn verdict(&self, profile: &MutantProfile, true_label: usize) -> Result<Verdict, DefenderError> {
        Ok(Verdict {
            certified: self.certify(profile, true_label),
            warned: self.warn(profile)?,
        })
    }
}

impl From<DefenderSpec> for Defender {
    fn from(spec: DefenderSpec) -> Self {
        Self {
            certify: spec,
            warn: spec,
        }
    }
}

impl fmt::Display for Defender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_composite() {
            write!(f, "certify={},warn={}", self.certify, self.warn)
        } else {
            write!(f, "{}", self.certify)
        }
    }
}

impl FromStr for Defender {
    type Err = DefenderError;

    /// A single spec (`hicert:0.8`) or a pair
    /// (`certify=hicert:0.8,warn=doma`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if !s.contains('=') {
            return Ok(s.parse::<DefenderSpec>()?.into());
        }
        let (mut certify, mut warn) = (None, None);
        for part in s.split(',') {
            match part.split_once('=') {
                Some(("certify", v)) => certify = Some(v.parse::<DefenderSpec>()?),
                Some(("warn", v)) => warn = Some(v.parse::<DefenderSpec>()?),
                _ => return Err(DefenderError::Parse(s.to_owned())),
            }
        }
        match (certify, warn) {
            (Some(c), Some(w)) => Ok(Defender::composite(c, w)),
            _ => Err(DefenderError::Parse(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub certified: bool,
    pub warned: bool,
}

/// All mutants predict `label`.
pub fn oma(profile: &MutantProfile, label: usize) -> bool {
    profile.mutants.iter().all(|m| m.label == label)
}

pub fn doma_certify(profile: &MutantProfile, true_label: usize) -> bool {
    oma(profile, true_label)
}

pub fn doma_warn(profile: &MutantProfile) -> bool {
    !oma(profile, profile.base.label)
}

/// Certifies agreement with the sample's own prediction; needs no true label.
pub fn c2_certify(profile: &MutantProfile) -> bool {
    oma(profile, profile.base.label)
}

pub fn pgpp_certify(profile: &MutantProfile, true_label: usize, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .all(|m| m.label == true_label && m.confidence > tau)
}

pub fn pgpp_warn(profile: &MutantProfile, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .any(|m| m.label != profile.base.label && m.confidence > tau)
}

/// `max { conf(m) : label(m) != y0 } < tau`, vacuously true when every
/// mutant predicts `y0`.
pub fn hicert_certify(profile: &MutantProfile, true_label: usize, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .filter(|m| m.label != true_label)
        .all(|m| m.confidence < tau)
}

/// Some mutant disagrees with the sample's prediction, or some agreeing
/// mutant has confidence below `tau`.
pub fn hicert_warn(profile: &MutantProfile, tau: f64) -> bool {
    label_difference(profile) || low_confidence_agreement(profile, tau)
}

/// First disjunct of the HiCert warning: a label difference.
pub fn label_difference(profile: &MutantProfile) -> bool {
    profile.mutants.iter().any(|m| m.label != profile.base.label)
}

/// Second disjunct: `min { conf(m) : label(m) == f(x) } < tau`, false when
/// no mutant agrees.
pub fn low_confidence_agreement(profile: &MutantProfile, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .filter(|m| m.label == profile.base.label)
        .any(|m| m.confidence < tau)
}

/// `min { conf(m) : label(m) != y0 } > tau`, vacuously true when every
/// mutant predicts `y0`.
pub fn hicert_flip_certify(profile: &MutantProfile, true_label: usize, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .filter(|m| m.label != true_label)
        .all(|m| m.confidence > tau)
}

pub fn pgpp_flip_certify(profile: &MutantProfile, true_label: usize, tau: f64) -> bool {
    profile
        .mutants
        .iter()
        .all(|m| m.label == true_label && m.confidence < tau)
}

/// Case number 1..=8 from (correctly predicted, warned, certified).
pub fn assign_case(correct: bool, verdict: Verdict) -> u8 {
    let base = if correct { 1 } else { 5 };
    base + match (verdict.warned, verdict.certified) {
        (true, true) => 0,
        (false, true) => 1,
        (true, false) => 2,
        (false, false) => 3,
    }
}

/// Inverse of [`assign_case`].
pub fn case_components(case: u8) -> Option<(bool, Verdict)> {
    if !(1..=8).contains(&case) {
        return None;
    }
    let correct = case <= 4;
    let (warned, certified) = match (case - 1) % 4 {
        0 => (true, true),
        1 => (false, true),
        2 => (true, false),
        _ => (false, false),
    };
    Some((correct, Verdict { certified, warned }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SampleTaxonomy {
    pub consistent: bool,
    pub inconsistent_mutants: Vec<usize>,
}

/// Consistency is relative to the true label, not to the prediction.
pub fn classify_sample(profile: &MutantProfile, true_label: usize) -> SampleTaxonomy {
    let inconsistent_mutants: Vec<usize> = profile
        .mutants
        .iter()
        .enumerate()
        .filter(|(_, m)| m.label != true_label)
        .map(|(i, _)| i)
        .collect();
    SampleTaxonomy {
        consistent: inconsistent_mutants.is_empty(),
        inconsistent_mutants,
    }
}

//! Evaluation metrics over per-sample records.
//!
//! Every metric is an exact count ratio. Metrics whose denominator is empty
//! are reported as undefined with a reason instead of zero.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{classify_mutants, Classifier, ClassifyError, Prediction};
use crate::cover::MaskSet;
use crate::dataset_io::DatasetRecord;
use crate::defenders::{assign_case, classify_sample, Defender, MutantProfile, Verdict};
use crate::exec::{try_map_range, Parallelism};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    Empty,
    #[error("internal identity violated: {0}")]
    Identity(String),
}

/// Per-sample outcome. `warned` is `None` for defenders that only define a
/// certification function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub true_label: usize,
    pub base: Prediction,
    pub certified: bool,
    pub warned: Option<bool>,
    pub consistent: bool,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.base.label == self.true_label
    }

    pub fn verdict(&self) -> Option<Verdict> {
        self.warned.map(|warned| Verdict {
            certified: self.certified,
            warned,
        })
    }

    pub fn case(&self) -> Option<u8> {
        self.verdict().map(|v| assign_case(self.correct(), v))
    }
}

/// Apply a defender to a classified sample. Warning is left `None` when the
/// warning side has no warning function.
pub fn evaluate_profile(
    sample_id: &str,
    true_label: usize,
    profile: &MutantProfile,
    defender: &Defender,
) -> EvalRecord {
    EvalRecord {
        sample_id: sample_id.to_owned(),
        true_label,
        base: profile.base,
        certified: defender.certify(profile, true_label),
        warned: defender.warn(profile).ok(),
        consistent: classify_sample(profile, true_label).consistent,
    }
}

/// Mutant profiles for a dataset, in dataset order.
pub fn profile_dataset(
    classifier: &dyn Classifier,
    records: &[DatasetRecord],
    set: &MaskSet,
    par: Parallelism,
) -> Result<Vec<MutantProfile>, ClassifyError> {
    try_map_range(records.len(), par, |i| {
        let r = &records[i];
        classify_mutants(classifier, &r.id, Some(&r.image), set)
    })
}

/// Evaluation records for precomputed profiles.
pub fn evaluate_profiles(
    records: &[DatasetRecord],
    profiles: &[MutantProfile],
    defender: &Defender,
) -> Vec<EvalRecord> {
    records
        .iter()
        .zip(profiles)
        .map(|(r, p)| evaluate_profile(&r.id, r.true_label, p, defender))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Self { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Percentage rounded to one decimal.
    pub fn percent(&self) -> f64 {
        (self.as_f64() * 1000.0).round() / 10.0
    }

    /// Exact comparison by cross-multiplication.
    pub fn cmp_exact(&self, other: &Ratio) -> std::cmp::Ordering {
        (u128::from(self.num) * u128::from(other.den))
            .cmp(&(u128::from(other.num) * u128::from(self.den)))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.1}%)", self.num, self.den, self.percent())
    }
}

/// A metric value or the reason it is undefined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Metric {
    Defined(Ratio),
    Undefined(String),
}

impl Metric {
    fn from_counts(num: u64, den: u64, reason: &str) -> Self {
        match Ratio::new(num, den) {
            Some(r) => Metric::Defined(r),
            None => Metric::Undefined(reason.to_owned()),
        }
    }

    pub fn ratio(&self) -> Option<Ratio> {
        match self {
            Metric::Defined(r) => Some(*r),
            Metric::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Defined(r) => write!(f, "{r}"),
            Metric::Undefined(reason) => write!(f, "undefined ({reason})"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetricRepr {
    numerator: Option<u64>,
    denominator: Option<u64>,
    percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    undefined: Option<String>,
}

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match self {
            Metric::Defined(r) => MetricRepr {
                numerator: Some(r.num),
                denominator: Some(r.den),
                percent: Some(r.percent()),
                undefined: None,
            },
            Metric::Undefined(reason) => MetricRepr {
                numerator: None,
                denominator: None,
                percent: None,
                undefined: Some(reason.clone()),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = MetricRepr::deserialize(d)?;
        match (repr.numerator, repr.denominator, repr.undefined) {
            (Some(num), Some(den), None) if den > 0 => Ok(Metric::Defined(Ratio { num, den })),
            (None, None, Some(reason)) => Ok(Metric::Undefined(reason)),
            _ => Err(serde::de::Error::custom("malformed metric")),
        }
    }
}

/// Serialized with all eight keys present.
pub type CaseCounts = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: u64,
    pub acc_clean: Metric,
    pub acc_cert: Metric,
    pub r_cert: Metric,
    pub r_cert_inc: Metric,
    pub acc_silent: Metric,
    pub r_fa: Metric,
    pub r_fs: Metric,
}

impl MetricsReport {
    pub fn named(&self) -> [(&'static str, &Metric); 7] {
        [
            ("acc_clean", &self.acc_clean),
            ("acc_cert", &self.acc_cert),
            ("r_cert", &self.r_cert),
            ("r_cert_inc", &self.r_cert_inc),
            ("acc_silent", &self.acc_silent),
            ("r_fa", &self.r_fa),
            ("r_fs", &self.r_fs),
        ]
    }
}

const NO_WARN: &str = "warning function undefined for this defender";

/// Case histogram over records; `None` when any record has no warning
/// outcome. All eight keys are always present.
pub fn case_histogram(records: &[EvalRecord]) -> Option<CaseCounts> {
    let mut counts: CaseCounts = (1..=8).map(|c| (c.to_string(), 0)).collect();
    for r in records {
        *counts.get_mut(&r.case()?.to_string()).unwrap() += 1;
    }
    Some(counts)
}

pub fn compute_metrics(records: &[EvalRecord]) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as u64;
    let count = |pred: &dyn Fn(&EvalRecord) -> bool| records.iter().filter(|r| pred(r)).count() as u64;

    let correct = count(&|r| r.correct());
    let correct_certified = count(&|r| r.correct() && r.certified);
    let certified = count(&|r| r.certified);
    let inconsistent = count(&|r| !r.consistent);
    let inconsistent_certified = count(&|r| !r.consistent && r.certified);

    let has_warnings = records.iter().all(|r| r.warned.is_some());
    let warn_metric = |num: u64, den: u64, reason: &str| {
        if has_warnings {
            Metric::from_counts(num, den, reason)
        } else {
            Metric::Undefined(NO_WARN.into())
        }
    };
    let silent = count(&|r| r.warned == Some(false));
    let silent_correct = count(&|r| r.warned == Some(false) && r.correct());
    let warned_correct = count(&|r| r.warned == Some(true) && r.correct());
    let silent_incorrect = count(&|r| r.warned == Some(false) && !r.correct());

    let report = MetricsReport {
        records: n,
        acc_clean: Metric::from_counts(correct, n, "no records"),
        acc_cert: Metric::from_counts(correct_certified, n, "no records"),
        r_cert: Metric::from_counts(certified, n, "no records"),
        r_cert_inc: Metric::from_counts(
            inconsistent_certified,
            inconsistent,
            "no inconsistent samples",
        ),
        acc_silent: warn_metric(silent_correct, silent, "no samples without warnings"),
        r_fa: warn_metric(warned_correct, correct, "no correctly predicted samples"),
        r_fs: warn_metric(silent_incorrect, n - correct, "no incorrectly predicted samples"),
    };
    if let Some(cases) = case_histogram(records) {
        check_identities(&report, &cases)?;
    }
    Ok(report)
}

/// Cross-checks between the metrics and the case histogram.
pub fn check_identities(report: &MetricsReport, cases: &CaseCounts) -> Result<(), MetricsError> {
    let c = |k: u8| cases.get(&k.to_string()).copied().unwrap_or(0);
    let n = report.records;
    let fail = |what: &str| Err(MetricsError::Identity(what.to_owned()));
    if (1..=8).map(c).sum::<u64>() != n {
        return fail("case counts sum to the record count");
    }
    let num = |m: &Metric| m.ratio().map(|r| r.num);
    if num(&report.acc_cert) != Some(c(1) + c(2)) {
        return fail("acc_cert = P1 + P2");
    }
    if num(&report.r_cert) != Some(c(1) + c(2) + c(5) + c(6)) {
        return fail("r_cert = P1 + P2 + P5 + P6");
    }
    if num(&report.acc_clean) != Some(c(1) + c(2) + c(3) + c(4)) {
        return fail("acc_clean = P1 + P2 + P3 + P4");
    }
    if let Some(r) = report.r_fa.ratio() {
        if (r.num, r.den) != (c(1) + c(3), c(1) + c(2) + c(3) + c(4)) {
            return fail("r_fa = (P1 + P3) / acc_clean");
        }
    }
    if let Some(r) = report.r_fs.ratio() {
        if (r.num, r.den) != (c(6) + c(8), c(5) + c(6) + c(7) + c(8)) {
            return fail("r_fs = (P6 + P8) / (1 - acc_clean)");
        }
    }
    let (cert, clean) = (report.acc_cert.ratio(), report.acc_clean.ratio());
    if let (Some(cert), Some(clean), Some(rc)) = (cert, clean, report.r_cert.ratio()) {
        if cert.num > clean.num || cert.num > rc.num {
            return fail("acc_cert <= min(acc_clean, r_cert)");
        }
    }
    Ok(())
}

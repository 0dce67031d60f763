//! Soundness oracle for certified detection.
//!
//! For a certified benign sample, every patched variant that the classifier
//! labels differently from the true label must trigger the warning function.
//! This module enumerates patched variants (every placement with every
//! content, or a seeded random subset), evaluates the defender on each
//! variant's own mutant profile and records any harmful variant that slips
//! through. Alongside it checks the consistent-mutant property: a harmful
//! variant whose patch sits under a mask with a true-label mutant always
//! shows a label difference.
//!
//! Violations are data, not errors, so deliberately unsound defenders can be
//! used as negative controls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{classify_mutants, hash_bytes, Classifier, ClassifyError, Query, Variant};
use crate::cover::{placements, CoverageIndex, MaskSet};
use crate::dataset_io::DatasetRecord;
use crate::defenders::{label_difference, Defender, DefenderError, MutantProfile};
use crate::exec::{self, Parallelism};
use crate::metrics::Ratio;
use crate::tensor::{apply_mask, apply_patch, Image, PatchSpec, Placement, TensorError};

/// Default ceiling on classifier calls per sample in exhaustive mode.
pub const DEFAULT_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("exhaustive scan needs {required} classifier calls, budget is {budget}")]
    BudgetExceeded { required: String, budget: u64 },
    #[error("patch spec plane {spec:?} does not match image plane {image:?}")]
    PlaneMismatch {
        spec: (usize, usize),
        image: (usize, usize),
    },
    #[error("attack alphabet {attack} exceeds image alphabet {image}")]
    Alphabet { attack: u16, image: u16 },
    #[error("invalid patch spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Defender(#[from] DefenderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttackMode {
    Exhaustive,
    Random { trials: u64, seed: u64 },
}

impl AttackMode {
    pub fn label(&self) -> &'static str {
        match self {
            AttackMode::Exhaustive => "exhaustive",
            AttackMode::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub patch_spec: PatchSpec,
    #[serde(flatten)]
    pub mode: AttackMode,
    /// Restrict patch content to `0..alphabet_override`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet_override: Option<u16>,
    #[serde(default = "default_budget")]
    pub budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl AttackConfig {
    pub fn exhaustive(patch_spec: PatchSpec) -> Self {
        Self {
            patch_spec,
            mode: AttackMode::Exhaustive,
            alphabet_override: None,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn random(patch_spec: PatchSpec, trials: u64, seed: u64) -> Self {
        Self {
            mode: AttackMode::Random { trials, seed },
            ..Self::exhaustive(patch_spec)
        }
    }
}

/// One patched version of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedVariant {
    /// Lexicographic position in the exhaustive order, when it fits in u64.
    pub index: Option<u64>,
    /// Draw number in random mode.
    pub trial: Option<u64>,
    pub placement_index: usize,
    pub placement: Placement,
    pub content: Vec<u8>,
    pub image: Image,
}

/// The set of all `(placement, content)` pairs for one image.
///
/// Exhaustive order: placements in [`placements`] order, and within a
/// placement contents counting upward in base `alphabet` with the first
/// content value as the most significant digit.
#[derive(Debug, Clone)]
pub struct VariantSpace<'a> {
    image: &'a Image,
    placements: Vec<Placement>,
    /// Start index of each placement's block, `None` once past u64.
    offsets: Vec<Option<u64>>,
    total: Option<u64>,
    alphabet: u16,
}

impl<'a> VariantSpace<'a> {
    pub fn new(image: &'a Image, cfg: &AttackConfig) -> Result<Self, AttackError> {
        cfg.patch_spec
            .validate()
            .map_err(|e| AttackError::Spec(e.0))?;
        if cfg.patch_spec.plane != image.plane() {
            return Err(AttackError::PlaneMismatch {
                spec: cfg.patch_spec.plane,
                image: image.plane(),
            });
        }
        let alphabet = cfg.alphabet_override.unwrap_or(image.alphabet());
        if alphabet == 0 || alphabet > image.alphabet() {
            return Err(AttackError::Alphabet {
                attack: alphabet,
                image: image.alphabet(),
            });
        }
        let placements = placements(&cfg.patch_spec);
        let mut offsets = Vec::with_capacity(placements.len());
        let mut running = Some(0u64);
        for p in &placements {
            offsets.push(running);
            let block = content_count(alphabet, p.cell_count() * image.channels());
            running = running.zip(block).and_then(|(a, b)| a.checked_add(b));
        }
        Ok(Self {
            image,
            placements,
            offsets,
            total: running,
            alphabet,
        })
    }

    /// Number of variants, `None` if it exceeds u64.
    pub fn total(&self) -> Option<u64> {
        self.total
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn alphabet(&self) -> u16 {
        self.alphabet
    }

    /// Exact classifier-call requirement, as a decimal or a product formula.
    fn required_calls(&self, calls_per_variant: u64) -> (Option<u64>, String) {
        let exact = self.total.and_then(|t| t.checked_mul(calls_per_variant));
        let text = match exact {
            Some(v) => v.to_string(),
            None => {
                let c = self.placements[0].cell_count() * self.image.channels();
                format!(
                    "{} x {}^{} x {}",
                    self.placements.len(),
                    self.alphabet,
                    c,
                    calls_per_variant
                )
            }
        };
        (exact, text)
    }

    fn check_budget(&self, budget: u64, calls_per_variant: u64) -> Result<u64, AttackError> {
        let (exact, text) = self.required_calls(calls_per_variant);
        match exact {
            Some(v) if v <= budget => Ok(self.total.unwrap()),
            _ => Err(AttackError::BudgetExceeded {
                required: text,
                budget,
            }),
        }
    }

    /// The variant at lexicographic `index`.
    pub fn variant(&self, index: u64) -> Result<PatchedVariant, AttackError> {
        let placement_index = match self
            .offsets
            .partition_point(|o| o.is_some_and(|o| o <= index))
        {
            0 => 0,
            k => k - 1,
        };
        let local = index - self.offsets[placement_index].unwrap_or(0);
        let placement = &self.placements[placement_index];
        let len = placement.cell_count() * self.image.channels();
        let mut content = vec![0u8; len];
        let mut rest = local;
        let base = u64::from(self.alphabet);
        for slot in content.iter_mut().rev() {
            *slot = (rest % base) as u8;
            rest /= base;
        }
        self.build(Some(index), None, placement_index, content)
    }

    /// Lexicographic index of a `(placement, content)` pair.
    pub fn index_of(&self, placement_index: usize, content: &[u8]) -> Option<u64> {
        let base = u64::from(self.alphabet);
        let mut local: u64 = 0;
        for &v in content {
            local = local.checked_mul(base)?.checked_add(u64::from(v))?;
        }
        self.offsets[placement_index]?.checked_add(local)
    }

    /// Uniform draw: placement first, then each content value.
    pub fn random_variant(&self, seed: u64, trial: u64) -> Result<PatchedVariant, AttackError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        let placement_index = rng.gen_range(0..self.placements.len());
        let len = self.placements[placement_index].cell_count() * self.image.channels();
        let content: Vec<u8> = (0..len)
            .map(|_| rng.gen_range(0..self.alphabet) as u8)
            .collect();
        let index = self.index_of(placement_index, &content);
        self.build(index, Some(trial), placement_index, content)
    }

    fn build(
        &self,
        index: Option<u64>,
        trial: Option<u64>,
        placement_index: usize,
        content: Vec<u8>,
    ) -> Result<PatchedVariant, AttackError> {
        let placement = self.placements[placement_index].clone();
        let image = apply_patch(self.image, &placement, &content)?;
        Ok(PatchedVariant {
            index,
            trial,
            placement_index,
            placement,
            content,
            image,
        })
    }
}

fn content_count(alphabet: u16, len: usize) -> Option<u64> {
    u64::from(alphabet).checked_pow(u32::try_from(len).ok()?)
}

/// Stream every variant of `image` under `cfg` (one classifier call per
/// variant counts against the budget in exhaustive mode).
pub fn enumerate_variants<'a>(
    image: &'a Image,
    cfg: &AttackConfig,
) -> Result<Box<dyn Iterator<Item = PatchedVariant> + 'a>, AttackError> {
    let space = VariantSpace::new(image, cfg)?;
    match cfg.mode {
        AttackMode::Exhaustive => {
            let total = space.check_budget(cfg.budget, 1)?;
            Ok(Box::new(
                (0..total).map(move |i| space.variant(i).expect("index within space")),
            ))
        }
        AttackMode::Random { trials, seed } => Ok(Box::new(
            (0..trials).map(move |t| space.random_variant(seed, t).expect("drawn within space")),
        )),
    }
}

/// Identifies a variant in a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantRef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trial: Option<u64>,
    /// Table-driven variants are named by their sample id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<String>,
}

impl VariantRef {
    fn of(v: &PatchedVariant) -> Self {
        Self {
            index: v.index,
            trial: v.trial,
            id: None,
            placement: Some(v.placement.clone()),
            content_digest: Some(format!("{:016x}", hash_bytes(&v.content, 0, 2))),
        }
    }

    fn sort_key(&self) -> (u64, u64, &str) {
        (
            self.index.unwrap_or(u64::MAX),
            self.trial.unwrap_or(u64::MAX),
            self.id.as_deref().unwrap_or(""),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sample_id: String,
    pub variant: VariantRef,
    pub variant_label: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thm1Violation {
    pub sample_id: String,
    pub variant: VariantRef,
    pub variant_label: usize,
    /// Covering mask whose benign mutant predicts the true label.
    pub consistent_mask: usize,
}

/// How detected harmful variants were caught.
///
/// `via_consistent_mask` / `via_inconsistent_mask` split by whether some
/// mask covering the patch had a true-label mutant on the benign sample;
/// `unknown_mask` is used when the placement is not known (table-driven
/// variants).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStats {
    pub label_difference_via_consistent_mask: u64,
    pub label_difference_via_inconsistent_mask: u64,
    pub low_confidence_via_inconsistent_mask: u64,
    /// Must stay zero: a consistent covering mask forces a label difference.
    pub low_confidence_via_consistent_mask: u64,
    pub label_difference_unknown_mask: u64,
    pub low_confidence_unknown_mask: u64,
}

impl PathStats {
    pub fn merge(mut self, o: PathStats) -> PathStats {
        self.label_difference_via_consistent_mask += o.label_difference_via_consistent_mask;
        self.label_difference_via_inconsistent_mask += o.label_difference_via_inconsistent_mask;
        self.low_confidence_via_inconsistent_mask += o.low_confidence_via_inconsistent_mask;
        self.low_confidence_via_consistent_mask += o.low_confidence_via_consistent_mask;
        self.label_difference_unknown_mask += o.label_difference_unknown_mask;
        self.low_confidence_unknown_mask += o.low_confidence_unknown_mask;
        self
    }

    pub fn label_difference(&self) -> u64 {
        self.label_difference_via_consistent_mask
            + self.label_difference_via_inconsistent_mask
            + self.label_difference_unknown_mask
    }

    pub fn low_confidence(&self) -> u64 {
        self.low_confidence_via_inconsistent_mask
            + self.low_confidence_via_consistent_mask
            + self.low_confidence_unknown_mask
    }
}

/// Result of an oracle run; merging reports is commutative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defender: Option<String>,
    pub samples_checked: u64,
    pub certified_count: u64,
    /// Samples whose variants were actually scanned.
    pub samples_scanned: u64,
    /// Scanned samples with no violation of the certified-detection property.
    pub samples_defended: u64,
    pub variants_evaluated: u64,
    pub harmful_variants: u64,
    pub violations: Vec<Violation>,
    /// Harmful variants placed under a consistent covering mask.
    pub thm1_checked: u64,
    pub thm1_violations: Vec<Thm1Violation>,
    pub mutant_identity_failures: u64,
    pub thm2_paths: PathStats,
}

impl SoundnessReport {
    pub fn merge(mut self, o: SoundnessReport) -> SoundnessReport {
        if self.mode.is_empty() {
            self.mode = o.mode;
        }
        if self.defender.is_none() {
            self.defender = o.defender;
        }
        self.samples_checked += o.samples_checked;
        self.certified_count += o.certified_count;
        self.samples_scanned += o.samples_scanned;
        self.samples_defended += o.samples_defended;
        self.variants_evaluated += o.variants_evaluated;
        self.harmful_variants += o.harmful_variants;
        self.violations.extend(o.violations);
        self.thm1_checked += o.thm1_checked;
        self.thm1_violations.extend(o.thm1_violations);
        self.mutant_identity_failures += o.mutant_identity_failures;
        self.thm2_paths = self.thm2_paths.merge(o.thm2_paths);
        self
    }

    /// Sort violations into a canonical order.
    pub fn finish(mut self) -> Self {
        self.violations.sort_by(|a, b| {
            (a.sample_id.as_str(), a.variant.sort_key()).cmp(&(b.sample_id.as_str(), b.variant.sort_key()))
        });
        self.thm1_violations.sort_by(|a, b| {
            (a.sample_id.as_str(), a.variant.sort_key(), a.consistent_mask)
                .cmp(&(b.sample_id.as_str(), b.variant.sort_key(), b.consistent_mask))
        });
        self
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
            && self.thm1_violations.is_empty()
            && self.mutant_identity_failures == 0
            && self.thm2_paths.low_confidence_via_consistent_mask == 0
    }
}

/// Which properties a scan checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checks {
    /// Certified detection for this defender.
    pub detection: Option<Defender>,
    /// Scan uncertified samples too (needed for the defense success ratio).
    pub scan_uncertified: bool,
    /// Consistent-mutant property.
    pub theorem1: bool,
}

struct Benign<'a> {
    record: &'a DatasetRecord,
    profile: MutantProfile,
    certified: bool,
}

/// Check one sample: certification on the benign profile, then every
/// variant in the configured attack space.
pub fn scan_sample(
    classifier: &dyn Classifier,
    record: &DatasetRecord,
    set: &MaskSet,
    checks: Checks,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<SoundnessReport, AttackError> {
    if let Some(d) = checks.detection {
        if !d.warn.kind.has_warning() {
            return Err(DefenderError::WarnUnsupported(d.warn.kind).into());
        }
    }
    let image = &record.image;
    let profile = classify_mutants(classifier, &record.id, Some(image), set)?;
    let certified = checks
        .detection
        .is_some_and(|d| d.certify(&profile, record.true_label));
    let scan_detection = checks.detection.is_some() && (certified || checks.scan_uncertified);
    let mut head = SoundnessReport {
        mode: cfg.mode.label().to_owned(),
        defender: checks.detection.map(|d| d.to_string()),
        samples_checked: 1,
        certified_count: u64::from(certified),
        ..Default::default()
    };
    if !scan_detection && !checks.theorem1 {
        return Ok(head);
    }
    let space = VariantSpace::new(image, cfg)?;
    let index = CoverageIndex::new(set);
    let covering: Vec<Vec<usize>> = space
        .placements()
        .iter()
        .map(|p| index.covering_masks(p))
        .collect();
    let benign = Benign {
        record,
        profile,
        certified,
    };
    let eval = |i: u64| -> Result<SoundnessReport, AttackError> {
        let v = match cfg.mode {
            AttackMode::Exhaustive => space.variant(i)?,
            AttackMode::Random { seed, .. } => space.random_variant(seed, i)?,
        };
        evaluate_variant(
            classifier,
            &benign,
            set,
            &covering[v.placement_index],
            &v,
            checks,
            scan_detection,
        )
    };
    let count = match cfg.mode {
        AttackMode::Exhaustive => space.check_budget(cfg.budget, 1 + set.len() as u64)?,
        AttackMode::Random { trials, .. } => trials,
    };
    let body = exec::try_fold_range(
        count as usize,
        par,
        SoundnessReport::default,
        |acc, i| Ok::<_, AttackError>(acc.merge(eval(i as u64)?)),
        SoundnessReport::merge,
    )?;
    if scan_detection {
        head.samples_scanned = 1;
        head.samples_defended = u64::from(body.violations.is_empty());
    }
    Ok(head.merge(body).finish())
}

fn variant_query<'a>(id: &'a str, image: &'a Image) -> Query<'a> {
    Query {
        sample_id: id,
        variant: Variant::Base,
        image: Some(image),
    }
}

fn evaluate_variant(
    classifier: &dyn Classifier,
    benign: &Benign<'_>,
    set: &MaskSet,
    covering: &[usize],
    v: &PatchedVariant,
    checks: Checks,
    scan_detection: bool,
) -> Result<SoundnessReport, AttackError> {
    let y0 = benign.record.true_label;
    let sample_id = &benign.record.id;
    let mut out = SoundnessReport {
        variants_evaluated: 1,
        ..Default::default()
    };
    let variant_id = match v.index {
        Some(i) => format!("{sample_id}@{i}"),
        None => format!("{sample_id}@t{}", v.trial.unwrap_or_default()),
    };
    let base = classifier.classify(&variant_query(&variant_id, &v.image))?;
    let consistent_cover: Vec<usize> = covering
        .iter()
        .copied()
        .filter(|&m| benign.profile.mutants[m].label == y0)
        .collect();

    if checks.theorem1 {
        for &m in covering {
            if apply_mask(&v.image, &set.masks[m])? != apply_mask(&benign.record.image, &set.masks[m])? {
                out.mutant_identity_failures += 1;
            }
        }
    }
    if base.label == y0 {
        return Ok(out);
    }
    out.harmful_variants = 1;
    let profile = classify_mutants(classifier, &variant_id, Some(&v.image), set)?;
    let differs = label_difference(&profile);

    if checks.theorem1 && !consistent_cover.is_empty() {
        out.thm1_checked = 1;
        if !differs {
            out.thm1_violations.push(Thm1Violation {
                sample_id: sample_id.clone(),
                variant: VariantRef::of(v),
                variant_label: base.label,
                consistent_mask: consistent_cover[0],
            });
        }
    }
    if let (true, Some(defender)) = (scan_detection, checks.detection) {
        if defender.warn(&profile)? {
            let via_consistent = !consistent_cover.is_empty();
            let paths = &mut out.thm2_paths;
            match (differs, via_consistent) {
                (true, true) => paths.label_difference_via_consistent_mask += 1,
                (true, false) => paths.label_difference_via_inconsistent_mask += 1,
                (false, false) => paths.low_confidence_via_inconsistent_mask += 1,
                (false, true) => paths.low_confidence_via_consistent_mask += 1,
            }
        } else {
            out.violations.push(Violation {
                sample_id: sample_id.clone(),
                variant: VariantRef::of(v),
                variant_label: base.label,
                reason: violation_reason(benign.certified, y0, base.label),
            });
        }
    }
    Ok(out)
}

fn violation_reason(certified: bool, y0: usize, label: usize) -> String {
    let status = if certified { "certified" } else { "uncertified" };
    format!("{status} sample: harmful variant labeled {label} (true label {y0}) raised no warning")
}

/// Certified detection for one sample: if certified, every harmful variant
/// must be warned.
pub fn check_certified_detection(
    classifier: &dyn Classifier,
    record: &DatasetRecord,
    set: &MaskSet,
    defender: Defender,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<SoundnessReport, AttackError> {
    let checks = Checks {
        detection: Some(defender),
        scan_uncertified: false,
        theorem1: false,
    };
    scan_sample(classifier, record, set, checks, cfg, par)
}

/// Consistent-mutant property for one sample; defender independent.
pub fn check_theorem1(
    classifier: &dyn Classifier,
    record: &DatasetRecord,
    set: &MaskSet,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<SoundnessReport, AttackError> {
    let checks = Checks {
        detection: None,
        scan_uncertified: false,
        theorem1: true,
    };
    scan_sample(classifier, record, set, checks, cfg, par)
}

/// Run `checks` over a dataset and merge the per-sample reports.
pub fn check_dataset(
    classifier: &dyn Classifier,
    records: &[DatasetRecord],
    set: &MaskSet,
    checks: Checks,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<SoundnessReport, AttackError> {
    let mut total = SoundnessReport {
        mode: cfg.mode.label().to_owned(),
        defender: checks.detection.map(|d| d.to_string()),
        ..Default::default()
    };
    for r in records {
        total = total.merge(scan_sample(classifier, r, set, checks, cfg, par)?);
    }
    Ok(total.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseSuccess {
    pub mode: String,
    pub defended: u64,
    pub samples: u64,
    pub ratio: f64,
    pub report: SoundnessReport,
}

impl DefenseSuccess {
    pub fn as_ratio(&self) -> Option<Ratio> {
        Ratio::new(self.defended, self.samples)
    }
}

/// Fraction of samples for which no enumerated harmful variant evades the
/// warning, certified or not. In exhaustive mode this is exact over the
/// attack space.
pub fn defense_success_ratio(
    classifier: &dyn Classifier,
    records: &[DatasetRecord],
    set: &MaskSet,
    defender: Defender,
    cfg: &AttackConfig,
    par: Parallelism,
) -> Result<DefenseSuccess, AttackError> {
    let checks = Checks {
        detection: Some(defender),
        scan_uncertified: true,
        theorem1: false,
    };
    let report = check_dataset(classifier, records, set, checks, cfg, par)?;
    let samples = report.samples_scanned;
    let defended = report.samples_defended;
    Ok(DefenseSuccess {
        mode: cfg.mode.label().to_owned(),
        defended,
        samples,
        ratio: if samples == 0 {
            1.0
        } else {
            defended as f64 / samples as f64
        },
        report,
    })
}

/// Certified detection where the patched variants are given as extra rows
/// of a prediction table (ids `variant_ids`) rather than generated images.
pub fn check_listed_variants(
    classifier: &dyn Classifier,
    sample_id: &str,
    true_label: usize,
    set: &MaskSet,
    defender: Defender,
    variant_ids: &[String],
) -> Result<SoundnessReport, AttackError> {
    if !defender.warn.kind.has_warning() {
        return Err(DefenderError::WarnUnsupported(defender.warn.kind).into());
    }
    let profile = classify_mutants(classifier, sample_id, None, set)?;
    let certified = defender.certify(&profile, true_label);
    let mut report = SoundnessReport {
        mode: "table".into(),
        defender: Some(defender.to_string()),
        samples_checked: 1,
        certified_count: u64::from(certified),
        ..Default::default()
    };
    if !certified {
        return Ok(report);
    }
    report.samples_scanned = 1;
    for id in variant_ids {
        report.variants_evaluated += 1;
        let variant = classify_mutants(classifier, id, None, set)?;
        if variant.base.label == true_label {
            continue;
        }
        report.harmful_variants += 1;
        let differs = label_difference(&variant);
        if defender.warn(&variant)? {
            if differs {
                report.thm2_paths.label_difference_unknown_mask += 1;
            } else {
                report.thm2_paths.low_confidence_unknown_mask += 1;
            }
        } else {
            report.violations.push(Violation {
                sample_id: sample_id.to_owned(),
                variant: VariantRef {
                    index: None,
                    trial: None,
                    id: Some(id.clone()),
                    placement: None,
                    content_digest: None,
                },
                variant_label: variant.base.label,
                reason: violation_reason(true, true_label, variant.base.label),
            });
        }
    }
    report.samples_defended = u64::from(report.violations.is_empty());
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::HashClassifier;
    use crate::cover::gen_square_cover;
    use crate::defenders::{DefenderKind, DefenderSpec};

    fn image8() -> Image {
        Image::new(8, 8, 1, 4, (0..64).map(|v| ((v * 7) % 4) as u8).collect()).unwrap()
    }

    fn cfg8() -> AttackConfig {
        AttackConfig::exhaustive(PatchSpec::square((8, 8), 2).unwrap())
    }

    #[test]
    fn exhaustive_count_and_first() {
        let img = image8();
        let space = VariantSpace::new(&img, &cfg8()).unwrap();
        assert_eq!(space.total(), Some(49 * 256));
        let mut it = enumerate_variants(&img, &cfg8()).unwrap();
        let first = it.next().unwrap();
        assert_eq!(first.index, Some(0));
        assert_eq!(first.placement, Placement::single(crate::tensor::Rect::new(0, 0, 2, 2)));
        assert_eq!(first.content, vec![0, 0, 0, 0]);
        assert_eq!(it.count() + 1, 12_544);
    }

    #[test]
    fn content_counts_in_base_alphabet() {
        let img = image8();
        let space = VariantSpace::new(&img, &cfg8()).unwrap();
        let v = space.variant(1).unwrap();
        assert_eq!(v.content, vec![0, 0, 0, 1]);
        let v = space.variant(4).unwrap();
        assert_eq!(v.content, vec![0, 0, 1, 0]);
        let v = space.variant(256).unwrap();
        assert_eq!(v.placement_index, 1);
        assert_eq!(v.content, vec![0, 0, 0, 0]);
        assert_eq!(space.index_of(v.placement_index, &v.content), Some(256));
        let last = space.variant(12_543).unwrap();
        assert_eq!(last.placement_index, 48);
        assert_eq!(last.content, vec![3, 3, 3, 3]);
    }

    #[test]
    fn full_plane_patch_is_refused() {
        let img = image8();
        let cfg = AttackConfig::exhaustive(PatchSpec::square((8, 8), 8).unwrap());
        let result = enumerate_variants(&img, &cfg).map(|_| ());
        match result {
            Err(AttackError::BudgetExceeded { required, .. }) => {
                assert_eq!(required, "1 x 4^64 x 1")
            }
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn budget_reports_exact_calls() {
        let img = image8();
        let mut cfg = cfg8();
        cfg.budget = 1000;
        let set = gen_square_cover((8, 8), 2, 3).unwrap();
        let record = DatasetRecord {
            id: "s".into(),
            true_label: 0,
            image: img,
        };
        let c = HashClassifier::new(7, 5).unwrap();
        let err = check_theorem1(&c, &record, &set, &cfg, Parallelism::Sequential).unwrap_err();
        assert_eq!(
            err,
            AttackError::BudgetExceeded {
                required: "125440".into(),
                budget: 1000
            }
        );
    }

    #[test]
    fn random_mode_is_seeded() {
        let img = image8();
        let cfg = AttackConfig::random(PatchSpec::square((8, 8), 2).unwrap(), 20, 99);
        let a: Vec<_> = enumerate_variants(&img, &cfg).unwrap().collect();
        let b: Vec<_> = enumerate_variants(&img, &cfg).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let space = VariantSpace::new(&img, &cfg).unwrap();
        for v in &a {
            let again = space.variant(v.index.unwrap()).unwrap();
            assert_eq!((again.placement, again.content.clone()), (v.placement.clone(), v.content.clone()));
        }
        let none = AttackConfig::random(PatchSpec::square((8, 8), 2).unwrap(), 0, 1);
        assert_eq!(enumerate_variants(&img, &none).unwrap().count(), 0);
    }

    #[test]
    fn frame_condition() {
        let img = image8();
        for v in enumerate_variants(&img, &cfg8()).unwrap().step_by(97) {
            for y in 0..8 {
                for x in 0..8 {
                    if !v.placement.rects()[0].contains(y, x) {
                        assert_eq!(v.image.get(y, x, 0), img.get(y, x, 0));
                    }
                }
            }
        }
    }

    #[test]
    fn alphabet_override_bounds() {
        let img = image8();
        let mut cfg = cfg8();
        cfg.alphabet_override = Some(2);
        assert_eq!(VariantSpace::new(&img, &cfg).unwrap().total(), Some(49 * 16));
        cfg.alphabet_override = Some(5);
        assert!(matches!(
            VariantSpace::new(&img, &cfg),
            Err(AttackError::Alphabet { .. })
        ));
    }

    #[test]
    fn trivial_defender_never_violates() {
        let set = gen_square_cover((8, 8), 2, 3).unwrap();
        let c = HashClassifier::new(7, 5).unwrap();
        let record = DatasetRecord {
            id: "s".into(),
            true_label: 1,
            image: image8(),
        };
        let d: Defender = DefenderSpec::new(DefenderKind::Hicert, 1.0).unwrap().into();
        let r = check_certified_detection(&c, &record, &set, d, &cfg8(), Parallelism::Parallel).unwrap();
        assert_eq!(r.certified_count, 1);
        assert_eq!(r.variants_evaluated, 12_544);
        assert!(r.violations.is_empty());
    }

    #[test]
    fn flip_defenders_rejected() {
        let set = gen_square_cover((8, 8), 2, 3).unwrap();
        let c = HashClassifier::new(7, 5).unwrap();
        let record = DatasetRecord {
            id: "s".into(),
            true_label: 1,
            image: image8(),
        };
        let d: Defender = DefenderSpec::new(DefenderKind::PgppFlip, 0.5).unwrap().into();
        assert!(matches!(
            check_certified_detection(&c, &record, &set, d, &cfg8(), Parallelism::Sequential),
            Err(AttackError::Defender(DefenderError::WarnUnsupported(_)))
        ));
    }
}

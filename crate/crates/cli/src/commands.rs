use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use patchcert::attack::{
    check_dataset, check_listed_variants, defense_success_ratio, AttackConfig, AttackMode, Checks, SoundnessReport,
};
use patchcert::classifier::{classify_mutants, BoundClassifier, PredictionRow, Variant};
use patchcert::cover::{gen_multi_cover, gen_rect_cover, gen_square_cover, verify_cover, CoverageReport};
use patchcert::dataset_io::{
    gen_synthetic_dataset, load_dataset, load_maskset, save_dataset, save_maskset, save_predictions, save_report,
    LabelMode, SyntheticSpec,
};
use patchcert::defenders::DefenderKind;
use patchcert::metrics::{
    case_histogram, check_identities, compute_metrics, evaluate_profiles, profile_dataset, CaseCounts, Metric,
    MetricsReport,
};
use patchcert::{
    ClassifierSpec, DatasetRecord, Defender, DefenderSpec, EvalRecord, MaskSet, MutantProfile, Parallelism, PatchSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{default_budget, Check, MaskgenParams, Mode, RunConfig};
use crate::{
    ClassifierArgs, ClassifierKindArg, EvaluateArgs, Exit, GenDataArgs, MaskArgs, MaskgenArgs, PredictArgs, ReportArgs,
    VerifyArgs,
};

macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

const DESK_SEED: u64 = 7;
const DESK_LABELS: usize = 5;
const DESK_SAMPLES: usize = 20;
const DESK_TAU: f64 = 0.8;

fn plane(v: &[usize]) -> (usize, usize) {
    (v[0], v[1])
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => save_report(value, p)?,
        None => out!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct MaskgenSummary<'a> {
    masks: usize,
    spec: PatchSpec,
    masks_per_axis: usize,
    covered: bool,
    placements_checked: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_uncovered: Option<&'a patchcert::Placement>,
}

pub fn maskgen(a: MaskgenArgs, par: Parallelism) -> Result<u8> {
    let pl = plane(&a.plane);
    let k = a.masks_per_axis;
    let set = match (a.patch_size, a.patch_area, a.patches) {
        (Some(p), None, None | Some(1)) => gen_square_cover(pl, p, k)?,
        (Some(p), None, Some(t)) => gen_multi_cover(&gen_square_cover(pl, p, k)?, t)?,
        (None, Some(area), None) => gen_rect_cover(pl, area, k)?,
        _ => bail!("give exactly one of --patch-size or --patch-area (--patches needs --patch-size)"),
    };
    let CoverageReport {
        ok,
        placements_checked,
        first_uncovered,
    } = verify_cover(&set, par);
    if let Some(out) = &a.out {
        save_maskset(&set, out)?;
    }
    let summary = MaskgenSummary {
        masks: set.len(),
        spec: set.spec,
        masks_per_axis: set.masks_per_axis,
        covered: ok,
        placements_checked,
        first_uncovered: first_uncovered.as_ref(),
    };
    out!("{}", serde_json::to_string(&summary)?);
    Ok(if ok { 0 } else { 1 })
}

pub fn gen_data(a: GenDataArgs) -> Result<u8> {
    let spec = SyntheticSpec {
        count: a.count,
        plane: plane(&a.plane),
        channels: a.channels,
        alphabet: a.alphabet,
        num_labels: a.num_labels,
        seed: a.seed,
        label_mode: a.label_mode.into(),
    };
    let data = gen_synthetic_dataset(&spec)?;
    save_dataset(&data, &a.out)?;
    eprintln!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(0)
}

impl ClassifierArgs {
    /// Flags over config over the hash default.
    fn resolve(&self, cfg: Option<&ClassifierSpec>) -> Result<ClassifierSpec> {
        if let Some(p) = &self.predictions {
            ensure!(
                self.seed.is_none() && self.num_labels.is_none(),
                "--seed/--num-labels do not apply to a prediction table"
            );
            return Ok(ClassifierSpec::Table { source: p.clone() });
        }
        let base = cfg.cloned().unwrap_or(ClassifierSpec::Hash {
            seed: DESK_SEED,
            num_labels: DESK_LABELS,
        });
        let (kind, seed, labels) = match &base {
            ClassifierSpec::Hash { seed, num_labels } => (ClassifierKindArg::Hash, *seed, *num_labels),
            ClassifierSpec::Linear { seed, num_labels } => (ClassifierKindArg::Linear, *seed, *num_labels),
            ClassifierSpec::Table { .. } => {
                if self.classifier.is_none() && self.seed.is_none() && self.num_labels.is_none() {
                    return Ok(base);
                }
                (ClassifierKindArg::Hash, DESK_SEED, DESK_LABELS)
            }
        };
        let seed = self.seed.unwrap_or(seed);
        let num_labels = self.num_labels.unwrap_or(labels);
        Ok(match self.classifier.unwrap_or(kind) {
            ClassifierKindArg::Hash => ClassifierSpec::Hash { seed, num_labels },
            ClassifierKindArg::Linear => ClassifierSpec::Linear { seed, num_labels },
        })
    }
}

/// Where the mask set came from, for provenance.
#[derive(Serialize, Clone)]
#[serde(untagged)]
enum MaskSource {
    File { file: PathBuf },
    Generated(MaskgenParams),
}

#[derive(Serialize, Clone)]
struct MaskInfo {
    #[serde(flatten)]
    source: MaskSource,
    spec: PatchSpec,
    count: usize,
}

fn resolve_masks(args: &MaskArgs, cfg: &RunConfig, plane: (usize, usize), default: Option<MaskgenParams>) -> Result<(MaskSet, MaskInfo)> {
    let generated = match (args.patch_size, args.masks_per_axis) {
        (None, None) => None,
        (p, k) => {
            let base = cfg.maskgen.or(default);
            Some(MaskgenParams {
                patch_size: p.or(base.map(|b| b.patch_size)).context("--patch-size is required")?,
                masks_per_axis: k.or(base.map(|b| b.masks_per_axis)).context("--masks-per-axis is required")?,
            })
        }
    };
    let (set, source) = match (&args.masks, generated, &cfg.masks, cfg.maskgen) {
        (Some(p), _, _, _) => (load_maskset(p)?, MaskSource::File { file: p.clone() }),
        (None, Some(g), _, _) => (gen_square_cover(plane, g.patch_size, g.masks_per_axis)?, MaskSource::Generated(g)),
        (None, None, Some(p), _) => (load_maskset(p)?, MaskSource::File { file: p.clone() }),
        (None, None, None, Some(g)) => (gen_square_cover(plane, g.patch_size, g.masks_per_axis)?, MaskSource::Generated(g)),
        (None, None, None, None) => match default {
            Some(g) => (gen_square_cover(plane, g.patch_size, g.masks_per_axis)?, MaskSource::Generated(g)),
            None => bail!("no mask set: give --masks or --patch-size/--masks-per-axis"),
        },
    };
    ensure!(
        set.plane() == plane,
        "mask set plane {:?} does not match dataset plane {:?}",
        set.plane(),
        plane
    );
    let info = MaskInfo {
        source,
        spec: set.spec,
        count: set.len(),
    };
    Ok((set, info))
}

fn dataset_plane(records: &[DatasetRecord]) -> Result<(usize, usize)> {
    let first = records.first().context("dataset is empty")?;
    let pl = first.image.plane();
    if let Some(r) = records.iter().find(|r| r.image.plane() != pl) {
        bail!("sample {} has plane {:?}, expected {:?}", r.id, r.image.plane(), pl);
    }
    Ok(pl)
}

pub fn predict(a: PredictArgs, par: Parallelism) -> Result<u8> {
    let spec = a.classifier.resolve(None)?;
    ensure!(
        !matches!(spec, ClassifierSpec::Table { .. }),
        "predict needs a built-in classifier"
    );
    let clf = spec.build()?;
    let data = load_dataset(&a.dataset)?;
    let (set, _) = resolve_masks(&a.masks, &RunConfig::default(), dataset_plane(&data)?, None)?;
    let profiles = profile_dataset(clf.as_dyn(), &data, &set, par)?;
    let mut rows = Vec::new();
    for (r, p) in data.iter().zip(&profiles) {
        let row = |variant, pred: &patchcert::Prediction| PredictionRow {
            sample_id: r.id.clone(),
            variant,
            label: pred.label,
            confidence: pred.confidence,
        };
        rows.push(row(Variant::Base, &p.base));
        for (i, m) in p.mutants.iter().enumerate() {
            rows.push(row(Variant::Mask { mask_index: i }, m));
        }
    }
    save_predictions(&rows, &a.out)?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(0)
}

/// Defenders to run: one per threshold for a bare kind, or exactly the
/// given spec.
fn resolve_defenders(defender: Option<&str>, taus: &[f64], default_tau: f64) -> Result<Vec<Defender>> {
    let text = defender.unwrap_or("hicert");
    if text.contains(':') || text.contains('=') {
        ensure!(taus.is_empty(), "defender {text:?} already fixes its threshold; drop --tau");
        return Ok(vec![text.parse::<Defender>()?]);
    }
    let kind: DefenderKind = text.parse()?;
    let taus: Vec<f64> = match (taus.is_empty(), kind.uses_tau()) {
        (false, _) => taus.to_vec(),
        (true, true) => vec![default_tau],
        (true, false) => vec![0.0],
    };
    taus.iter()
        .map(|&t| Ok(DefenderSpec::new(kind, t)?.into()))
        .collect()
}

#[derive(Serialize)]
struct EvalConfig {
    classifier: ClassifierSpec,
    dataset: PathBuf,
    samples: usize,
    masks: MaskInfo,
}

#[derive(Serialize, Deserialize)]
struct EvaluationReport {
    defender: String,
    config: Value,
    metrics: MetricsReport,
    cases: Option<CaseCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    records: Option<Vec<EvalRecord>>,
}

fn report_file_name(d: &Defender) -> String {
    let slug: String = d
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect();
    format!("report-{slug}.json")
}

fn timed_profiles(
    clf: &BoundClassifier,
    data: &[DatasetRecord],
    set: &MaskSet,
) -> Result<Vec<MutantProfile>> {
    let mut out = Vec::with_capacity(data.len());
    let start = Instant::now();
    for r in data {
        let t = Instant::now();
        out.push(classify_mutants(clf.as_dyn(), &r.id, Some(&r.image), set)?);
        eprintln!(
            "timing sample={} mutants={} micros={}",
            r.id,
            set.len(),
            t.elapsed().as_micros()
        );
    }
    eprintln!(
        "timing total samples={} micros={}",
        data.len(),
        start.elapsed().as_micros()
    );
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs, par: Parallelism) -> Result<u8> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let spec = a.classifier.resolve(cfg.classifier.as_ref())?;
    let dataset = a.dataset.clone().or(cfg.dataset.clone()).context("--dataset is required")?;
    let taus = if a.taus.is_empty() {
        cfg.taus.clone().unwrap_or_default()
    } else {
        a.taus.clone()
    };
    let defenders = resolve_defenders(a.defender.as_deref().or(cfg.defender.as_deref()), &taus, DESK_TAU)?;
    let out = a.out.clone().or(cfg.out.clone());
    ensure!(
        defenders.len() == 1 || out.is_none() || a.out_dir.is_some(),
        "several thresholds produce several reports: use --out-dir"
    );
    let timing = a.timing || cfg.timing.unwrap_or(false);

    let clf = spec.build()?;
    let data = load_dataset(&dataset)?;
    let (set, masks) = resolve_masks(&a.masks, &cfg, dataset_plane(&data)?, None)?;
    let profiles = if timing {
        timed_profiles(&clf, &data, &set)?
    } else {
        profile_dataset(clf.as_dyn(), &data, &set, par)?
    };
    let config = serde_json::to_value(EvalConfig {
        classifier: spec,
        dataset,
        samples: data.len(),
        masks,
    })?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for d in &defenders {
        let records = evaluate_profiles(&data, &profiles, d);
        let metrics = compute_metrics(&records)?;
        let cases = case_histogram(&records);
        if let Some(c) = &cases {
            check_identities(&metrics, c)?;
        }
        let report = EvaluationReport {
            defender: d.to_string(),
            config: config.clone(),
            metrics,
            cases,
            records: a.with_records.then_some(records),
        };
        match (&a.out_dir, &out) {
            (Some(dir), _) => save_report(&report, dir.join(report_file_name(d)))?,
            (None, Some(p)) => save_report(&report, p)?,
            (None, None) => out!("{}", serde_json::to_string(&report)?),
        }
        eprintln!("{}", metrics_line(&report.defender, &report.metrics));
    }
    Ok(0)
}

fn metric_text(m: &Metric) -> String {
    match m.ratio() {
        Some(r) => format!("{:.1}% ({}/{})", r.percent(), r.num, r.den),
        None => "undefined".into(),
    }
}

fn metrics_line(defender: &str, m: &MetricsReport) -> String {
    let parts: Vec<String> = m
        .named()
        .iter()
        .map(|(n, v)| format!("{n}={}", metric_text(v)))
        .collect();
    format!("{defender}: {}", parts.join(" "))
}

#[derive(Serialize)]
struct AttackInfo {
    #[serde(flatten)]
    mode: AttackModeInfo,
    budget: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    alphabet_override: Option<u16>,
}

#[derive(Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum AttackModeInfo {
    Exhaustive,
    Random { trials: u64, seed: u64 },
    Table,
}

#[derive(Serialize)]
struct VerifyConfig {
    classifier: ClassifierSpec,
    dataset: Value,
    samples: usize,
    masks: MaskInfo,
    defender: String,
    attack: AttackInfo,
    checks: Vec<Check>,
}

#[derive(Serialize)]
struct SuccessRatio {
    mode: String,
    defended: u64,
    samples: u64,
    ratio: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    ok: bool,
    config: VerifyConfig,
    soundness: SoundnessReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    skipped_checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_suc: Option<SuccessRatio>,
}

fn desk_dataset(samples: usize, seed: u64, num_labels: usize) -> Result<Vec<DatasetRecord>> {
    Ok(gen_synthetic_dataset(&SyntheticSpec {
        count: samples,
        plane: (8, 8),
        channels: 1,
        alphabet: 4,
        num_labels,
        seed,
        label_mode: LabelMode::ClassifierAligned,
    })?)
}

pub fn verify(a: VerifyArgs, par: Parallelism) -> Result<u8> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let attack = cfg.attack();
    let spec = a.classifier.resolve(cfg.classifier.as_ref())?;
    let clf = spec.build()?;
    let table = clf.as_table();

    let samples = a.samples.or(cfg.samples);
    let (mut data, dataset_info) = match a.dataset.clone().or(cfg.dataset.clone()) {
        Some(p) => (load_dataset(&p)?, serde_json::to_value(&p)?),
        None => {
            let (seed, labels) = match &spec {
                ClassifierSpec::Hash { seed, num_labels } | ClassifierSpec::Linear { seed, num_labels } => {
                    (*seed, *num_labels)
                }
                ClassifierSpec::Table { .. } => bail!("a prediction table needs --dataset"),
            };
            let n = samples.unwrap_or(DESK_SAMPLES);
            let info = serde_json::json!({"synthetic": {"count": n, "plane": [8, 8], "channels": 1, "alphabet": 4, "seed": seed, "label_mode": "classifier-aligned"}});
            (desk_dataset(n, seed, labels)?, info)
        }
    };
    if let Some(n) = samples {
        data.truncate(n);
    }
    let desk_masks = MaskgenParams {
        patch_size: 2,
        masks_per_axis: 3,
    };
    let (set, masks) = resolve_masks(&a.masks, &cfg, dataset_plane(&data)?, Some(desk_masks))?;

    let defender: Defender = match a.defender_override.as_deref() {
        Some(s) => s.parse()?,
        None => {
            let taus: Vec<f64> = a.tau.into_iter().collect();
            let mut ds = resolve_defenders(a.defender.as_deref().or(cfg.defender.as_deref()), &taus, DESK_TAU)?;
            ensure!(ds.len() == 1, "verify takes a single threshold");
            ds.remove(0)
        }
    };
    ensure!(
        defender.warn.kind.has_warning(),
        "{} has no warning function; verification needs one",
        defender.warn.kind
    );

    let mut checks = if a.checks.is_empty() {
        cfg.checks.clone().unwrap_or_else(|| vec![Check::Def1, Check::Thm1])
    } else {
        a.checks.clone()
    };
    if checks.contains(&Check::Thm2Paths) && !checks.contains(&Check::Def1) {
        checks.push(Check::Def1);
    }
    checks.sort();
    checks.dedup();

    let mode = a.mode.or(attack.mode).unwrap_or(Mode::Exhaustive);
    let budget = a.budget.or(attack.budget).unwrap_or_else(default_budget);
    let alphabet_override = a.alphabet.or(attack.alphabet_override);
    let mut skipped = Vec::new();

    let (soundness, r_suc, mode_info) = if let Some(table) = table {
        ensure!(
            mode == Mode::Exhaustive && a.trials.is_none(),
            "a prediction table lists its own variants; --mode random does not apply"
        );
        for c in [Check::Thm1, Check::Rsuc] {
            if checks.contains(&c) {
                skipped.push(c);
            }
        }
        let mut total = SoundnessReport {
            mode: "table".into(),
            defender: Some(defender.to_string()),
            ..Default::default()
        };
        for r in &data {
            let variants = table.sample_ids_with_prefix(&format!("{}@", r.id));
            let rep = check_listed_variants(table, &r.id, r.true_label, &set, defender, &variants)?;
            total = total.merge(rep);
        }
        (total.finish(), None, AttackModeInfo::Table)
    } else {
        let (attack_mode, info) = match mode {
            Mode::Exhaustive => {
                ensure!(a.trials.is_none(), "--trials needs --mode random");
                (AttackMode::Exhaustive, AttackModeInfo::Exhaustive)
            }
            Mode::Random => {
                let trials = a.trials.or(attack.trials).context("--mode random needs --trials")?;
                let seed = a.attack_seed.or(attack.seed).unwrap_or(0);
                (AttackMode::Random { trials, seed }, AttackModeInfo::Random { trials, seed })
            }
        };
        let acfg = AttackConfig {
            patch_spec: set.spec,
            mode: attack_mode,
            alphabet_override,
            budget,
        };
        let scan = Checks {
            detection: checks.contains(&Check::Def1).then_some(defender),
            scan_uncertified: false,
            theorem1: checks.contains(&Check::Thm1),
        };
        let mut soundness = check_dataset(clf.as_dyn(), &data, &set, scan, &acfg, par)?;
        if scan.detection.is_none() {
            soundness.defender = None;
        }
        let r_suc = if checks.contains(&Check::Rsuc) {
            let s = defense_success_ratio(clf.as_dyn(), &data, &set, defender, &acfg, par)?;
            Some(SuccessRatio {
                mode: s.mode,
                defended: s.defended,
                samples: s.samples,
                ratio: s.ratio,
            })
        } else {
            None
        };
        (soundness, r_suc, info)
    };

    let ok = soundness.is_clean();
    eprintln!(
        "mode={} samples={} certified={} variants={} harmful={} violations={} thm1_counterexamples={}{}",
        soundness.mode,
        soundness.samples_checked,
        soundness.certified_count,
        soundness.variants_evaluated,
        soundness.harmful_variants,
        soundness.violations.len(),
        soundness.thm1_violations.len(),
        r_suc
            .as_ref()
            .map(|s| format!(" r_suc={}/{} ({})", s.defended, s.samples, s.mode))
            .unwrap_or_default()
    );
    let report = VerifyReport {
        ok,
        config: VerifyConfig {
            classifier: spec,
            dataset: dataset_info,
            samples: data.len(),
            masks,
            defender: defender.to_string(),
            attack: AttackInfo {
                mode: mode_info,
                budget,
                alphabet_override,
            },
            checks,
        },
        soundness,
        skipped_checks: skipped,
        r_suc,
    };
    emit(&report, a.out.as_deref().or(cfg.out.as_deref()))?;
    Ok(if ok { 0 } else { 1 })
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

pub fn report(a: ReportArgs) -> Result<u8> {
    let eval: EvaluationReport = serde_json::from_value(read_json(&a.evaluation)?)
        .with_context(|| format!("{} is not an evaluation report", a.evaluation.display()))?;
    let soundness = a.soundness.as_deref().map(read_json).transpose()?;
    if let Some(s) = &soundness {
        if s.get("soundness").is_none() {
            return Err(anyhow::Error::new(Exit(3)).context(format!(
                "{} is not a soundness report",
                a.soundness.as_ref().unwrap().display()
            )));
        }
    }

    out!("{:<12}{}", "defender", eval.defender);
    out!("{:<12}{}", "records", eval.metrics.records);
    for (name, m) in eval.metrics.named() {
        out!("{name:<12}{}", metric_text(m));
    }
    match &eval.cases {
        Some(c) => {
            let row: Vec<String> = c.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            out!("{:<12}{}", "cases", row.join(" "));
        }
        None => out!("{:<12}undefined (no warning function)", "cases"),
    }
    if let Some(s) = &soundness {
        let v = |k: &str| s["soundness"][k].clone();
        out!(
            "soundness mode={} violations={} thm1_counterexamples={} ok={}",
            v("mode"),
            v("violations").as_array().map_or(0, Vec::len),
            v("thm1_violations").as_array().map_or(0, Vec::len),
            s["ok"]
        );
    }

    let combined = serde_json::json!({
        "defender": eval.defender,
        "config": eval.config,
        "metrics": eval.metrics,
        "cases": eval.cases,
        "soundness": soundness.as_ref().map(|s| s["soundness"].clone()),
    });
    if let Some(out) = &a.out {
        save_report(&combined, out)?;
    }
    Ok(0)
}

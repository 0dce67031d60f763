//! Synthetic datasets and the on-disk formats.
//!
//! Record streams are JSON lines, mask sets and reports are single JSON
//! documents. Every loader validates strictly and reports the offending
//! line; values are never coerced.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{HashClassifier, Prediction, PredictionRow, Variant};
use crate::cover::MaskSet;
use crate::tensor::{Image, Mask, PatchSpec, Rect, TensorError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {msg}")]
    MalformedJson { path: String, line: usize, msg: String },
    #[error("{path}:{line}: schema violation: {msg}")]
    Schema { path: String, line: usize, msg: String },
    #[error("{path}:{line}: duplicate key {key}")]
    DuplicateKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: value out of range: {msg}")]
    OutOfRange { path: String, line: usize, msg: String },
    #[error("{path}:{line}: unsupported format_version {version}")]
    UnsupportedVersion { path: String, line: usize, version: u64 },
    #[error("invalid dataset parameters: {0}")]
    Invalid(String),
}

impl DataError {
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::Io { .. } => "io",
            DataError::MalformedJson { .. } => "malformed_json",
            DataError::Schema { .. } => "schema",
            DataError::DuplicateKey { .. } => "duplicate_key",
            DataError::OutOfRange { .. } => "out_of_range",
            DataError::UnsupportedVersion { .. } => "unsupported_version",
            DataError::Invalid(_) => "invalid",
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            DataError::MalformedJson { line, .. }
            | DataError::Schema { line, .. }
            | DataError::DuplicateKey { line, .. }
            | DataError::OutOfRange { line, .. }
            | DataError::UnsupportedVersion { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// A sample with its true label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub id: String,
    pub true_label: usize,
    pub image: Image,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Labels are the hash classifier's predictions under the same seed.
    #[default]
    #[serde(alias = "classifier_aligned")]
    ClassifierAligned,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub plane: (usize, usize),
    pub channels: usize,
    pub alphabet: u16,
    pub num_labels: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_mode: LabelMode,
}

/// Seeded uniform pixels; ids are `sample-00000`, `sample-00001`, ...
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<DatasetRecord>, DataError> {
    let (h, w) = spec.plane;
    if spec.count == 0 || h == 0 || w == 0 || spec.channels == 0 {
        return Err(DataError::Invalid("count, plane and channels must be positive".into()));
    }
    if !(2..=256).contains(&spec.alphabet) {
        return Err(DataError::Invalid(format!("alphabet {} outside 2..=256", spec.alphabet)));
    }
    let hash = HashClassifier::new(spec.seed, spec.num_labels)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = h * w * spec.channels;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let pixels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..spec.alphabet) as u8).collect();
        let image = Image::new(h, w, spec.channels, spec.alphabet, pixels).expect("valid by construction");
        let true_label = match spec.label_mode {
            LabelMode::ClassifierAligned => hash.predict(&image).label,
            LabelMode::Uniform => rng.gen_range(0..spec.num_labels),
        };
        out.push(DatasetRecord {
            id: format!("sample-{i:05}"),
            true_label,
            image,
        });
    }
    Ok(out)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: display(path),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: display(path),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)?;
    Ok(())
}

/// Parse one JSON value and then its typed form, keeping the two failure
/// kinds apart.
fn parse_typed<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T, DataError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| DataError::MalformedJson {
        path: display(path),
        line: line + e.line().saturating_sub(1),
        msg: e.to_string(),
    })?;
    check_version(path, line, &value)?;
    serde_json::from_value(value).map_err(|e| DataError::Schema {
        path: display(path),
        line,
        msg: e.to_string(),
    })
}

fn check_version(path: &Path, line: usize, value: &serde_json::Value) -> Result<(), DataError> {
    match value.get("format_version") {
        None => Ok(()),
        Some(v) => match v.as_u64() {
            Some(1) => Ok(()),
            Some(version) => Err(DataError::UnsupportedVersion {
                path: display(path),
                line,
                version,
            }),
            None => Err(DataError::Schema {
                path: display(path),
                line,
                msg: "format_version must be an unsigned integer".into(),
            }),
        },
    }
}

fn version() -> u32 {
    FORMAT_VERSION
}

/// Non-blank lines with 1-based numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRow {
    #[serde(default = "version")]
    format_version: u32,
    id: String,
    label: usize,
    shape: [usize; 3],
    alphabet: u64,
    pixels: Vec<u64>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DataError> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in lines(&text) {
        let row: DatasetRow = parse_typed(path, line, l)?;
        let range = |msg: String| DataError::OutOfRange {
            path: display(path),
            line,
            msg,
        };
        if !(2..=256).contains(&row.alphabet) {
            return Err(range(format!("alphabet {} outside 2..=256", row.alphabet)));
        }
        if let Some(p) = row.pixels.iter().find(|&&p| p >= row.alphabet) {
            return Err(range(format!("pixel {p} not below alphabet {}", row.alphabet)));
        }
        let [h, w, c] = row.shape;
        let pixels = row.pixels.iter().map(|&p| p as u8).collect();
        let image = Image::new(h, w, c, row.alphabet as u16, pixels).map_err(|e| match e {
            TensorError::PixelCount { .. } | TensorError::InvalidShape { .. } => DataError::Schema {
                path: display(path),
                line,
                msg: e.to_string(),
            },
            other => range(other.to_string()),
        })?;
        if !seen.insert(row.id.clone()) {
            return Err(DataError::DuplicateKey {
                path: display(path),
                line,
                key: format!("id {:?}", row.id),
            });
        }
        out.push(DatasetRecord {
            id: row.id,
            true_label: row.label,
            image,
        });
    }
    Ok(out)
}

pub fn save_dataset(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut text = String::new();
    for r in records {
        let row = DatasetRow {
            format_version: FORMAT_VERSION,
            id: r.id.clone(),
            label: r.true_label,
            shape: [r.image.height(), r.image.width(), r.image.channels()],
            alphabet: u64::from(r.image.alphabet()),
            pixels: r.image.pixels().iter().map(|&p| u64::from(p)).collect(),
        };
        text.push_str(&serde_json::to_string(&row).expect("serializable"));
        text.push('\n');
    }
    write(path.as_ref(), &text)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    rects: Vec<Rect>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    #[serde(default = "version")]
    format_version: u32,
    plane: (usize, usize),
    spec: PatchSpec,
    masks: Vec<MaskEntry>,
    #[serde(default)]
    masks_per_axis: usize,
    #[serde(default)]
    compound: bool,
}

pub fn load_maskset(path: impl AsRef<Path>) -> Result<MaskSet, DataError> {
    let path = path.as_ref();
    let text = read(path)?;
    let file: MaskFile = parse_typed(path, 1, &text)?;
    let range = |msg: String| DataError::OutOfRange {
        path: display(path),
        line: 1,
        msg,
    };
    file.spec.validate().map_err(|e| range(e.to_string()))?;
    if file.spec.plane != file.plane {
        return Err(range(format!(
            "spec plane {:?} differs from file plane {:?}",
            file.spec.plane, file.plane
        )));
    }
    let (h, w) = file.plane;
    let masks = file
        .masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| Mask::new(h, w, m.rects).map_err(|e| range(format!("mask {i}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MaskSet {
        masks,
        spec: file.spec,
        masks_per_axis: file.masks_per_axis,
        compound: file.compound,
    })
}

pub fn maskset_to_json(set: &MaskSet) -> String {
    let file = MaskFile {
        format_version: FORMAT_VERSION,
        plane: set.plane(),
        spec: set.spec,
        masks: set
            .masks
            .iter()
            .map(|m| MaskEntry {
                rects: m.rects().to_vec(),
            })
            .collect(),
        masks_per_axis: set.masks_per_axis,
        compound: set.compound,
    };
    let mut s = serde_json::to_string(&file).expect("serializable");
    s.push('\n');
    s
}

pub fn save_maskset(set: &MaskSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    write(path.as_ref(), &maskset_to_json(set))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    #[serde(default = "version", skip_serializing)]
    #[allow(dead_code)]
    format_version: u32,
    sample_id: String,
    variant: Variant,
    label: usize,
    confidence: f64,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>, DataError> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in lines(&text) {
        let row: PredictionLine = parse_typed(path, line, l)?;
        Prediction::new(row.label, row.confidence).map_err(|e| DataError::OutOfRange {
            path: display(path),
            line,
            msg: e.to_string(),
        })?;
        if !seen.insert((row.sample_id.clone(), row.variant)) {
            return Err(DataError::DuplicateKey {
                path: display(path),
                line,
                key: format!("({:?}, {})", row.sample_id, row.variant),
            });
        }
        out.push(PredictionRow {
            sample_id: row.sample_id,
            variant: row.variant,
            label: row.label,
            confidence: row.confidence,
        });
    }
    Ok(out)
}

pub fn save_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write(path.as_ref(), &text)
}

/// Pretty-printed JSON with a trailing newline.
pub fn save_report<T: Serialize + ?Sized>(report: &T, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut s = serde_json::to_string_pretty(report).expect("serializable");
    s.push('\n');
    write(path.as_ref(), &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Classifier;
    use crate::classifier::Query;
    use crate::cover::{gen_multi_cover, gen_rect_cover, gen_square_cover};

    fn spec(mode: LabelMode, count: usize) -> SyntheticSpec {
        SyntheticSpec {
            count,
            plane: (8, 8),
            channels: 1,
            alphabet: 4,
            num_labels: 5,
            seed: 11,
            label_mode: mode,
        }
    }

    fn hash_accuracy(records: &[DatasetRecord], seed: u64) -> f64 {
        let c = HashClassifier::new(seed, 5).unwrap();
        let hits = records
            .iter()
            .filter(|r| c.classify(&Query::image(&r.image)).unwrap().label == r.true_label)
            .count();
        hits as f64 / records.len() as f64
    }

    #[test]
    fn aligned_labels_are_predictions() {
        let data = gen_synthetic_dataset(&spec(LabelMode::ClassifierAligned, 100)).unwrap();
        assert_eq!(hash_accuracy(&data, 11), 1.0);
        assert_eq!(data[3].id, "sample-00003");
    }

    #[test]
    fn uniform_labels_near_chance() {
        let data = gen_synthetic_dataset(&spec(LabelMode::Uniform, 1000)).unwrap();
        let acc = hash_accuracy(&data, 11);
        assert!((acc - 0.2).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let data = gen_synthetic_dataset(&spec(LabelMode::Uniform, 30)).unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_dataset(&data, &a).unwrap();
        save_dataset(&gen_synthetic_dataset(&spec(LabelMode::Uniform, 30)).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), data);
    }

    #[test]
    fn dataset_row_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = gen_synthetic_dataset(&spec(LabelMode::Uniform, 1)).unwrap();
        save_dataset(&data, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"format_version":1,"id":"sample-00000","label":"#));
        assert!(text.contains(r#""shape":[8,8,1],"alphabet":4,"pixels":["#));
    }

    fn write_lines(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn dataset_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ok = r#"{"id":"a","label":0,"shape":[1,1,1],"alphabet":2,"pixels":[1]}"#;
        let cases = [
            (format!("{ok}\n{{not json"), "malformed_json", 2),
            (format!("{ok}\n{}", ok.replace("\"label\":0", "\"label\":\"0\"")), "schema", 2),
            (format!("{ok}\n{ok}"), "duplicate_key", 2),
            (ok.replace("[1]}", "[2]}"), "out_of_range", 1),
            (ok.replace("[1]}", "[1,0]}"), "schema", 1),
            (ok.replace("{\"id\"", "{\"format_version\":2,\"id\""), "unsupported_version", 1),
            (ok.replace("}", ",\"extra\":1}"), "schema", 1),
        ];
        for (i, (body, kind, line)) in cases.iter().enumerate() {
            let p = write_lines(dir.path(), &format!("{i}.jsonl"), body);
            let e = load_dataset(&p).unwrap_err();
            assert_eq!((e.kind(), e.line()), (*kind, Some(*line)), "case {i}: {e}");
        }
        let missing = load_dataset(dir.path().join("nope.jsonl")).unwrap_err();
        assert_eq!(missing.kind(), "io");
    }

    #[test]
    fn maskset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sq = gen_square_cover((8, 8), 2, 3).unwrap();
        let sets = [
            sq.clone(),
            gen_rect_cover((10, 10), 6, 3).unwrap(),
            gen_multi_cover(&sq, 2).unwrap(),
        ];
        for (i, set) in sets.iter().enumerate() {
            let p = dir.path().join(format!("m{i}.json"));
            save_maskset(set, &p).unwrap();
            assert_eq!(&load_maskset(&p).unwrap(), set);
        }
        let text = maskset_to_json(&sq);
        assert!(text.starts_with(r#"{"format_version":1,"plane":[8,8],"spec":{"plane":[8,8],"kind":"square","size":2},"masks":[{"rects":[[0,0,4,4]]}"#));
    }

    #[test]
    fn maskset_rejects_out_of_plane() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"format_version":1,"plane":[4,4],"spec":{"plane":[4,4],"kind":"square","size":2},"masks":[{"rects":[[3,3,2,2]]}]}"#;
        let p = write_lines(dir.path(), "m.json", body);
        assert_eq!(load_maskset(&p).unwrap_err().kind(), "out_of_range");
    }

    #[test]
    fn predictions_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            PredictionRow {
                sample_id: "x".into(),
                variant: Variant::Base,
                label: 0,
                confidence: 0.75,
            },
            PredictionRow {
                sample_id: "x".into(),
                variant: Variant::Mask { mask_index: 0 },
                label: 1,
                confidence: 0.5,
            },
        ];
        let p = dir.path().join("p.jsonl");
        save_predictions(&rows, &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap().lines().next().unwrap(),
            r#"{"sample_id":"x","variant":"base","label":0,"confidence":0.75}"#
        );
        assert_eq!(load_predictions(&p).unwrap(), rows);

        let base = r#"{"sample_id":"x","variant":"base","label":0,"confidence":0.75}"#;
        let dup = write_lines(dir.path(), "dup.jsonl", &format!("{base}\n\n{base}\n"));
        let e = load_predictions(&dup).unwrap_err();
        assert_eq!((e.kind(), e.line()), ("duplicate_key", Some(3)));
        assert!(e.to_string().contains(":3:"));
        let one = write_lines(dir.path(), "one.jsonl", &base.replace("0.75", "1.0"));
        assert_eq!(load_predictions(&one).unwrap_err().kind(), "out_of_range");
        let bad_variant = write_lines(dir.path(), "v.jsonl", &base.replace("\"base\"", "\"mask\""));
        assert_eq!(load_predictions(&bad_variant).unwrap_err().kind(), "schema");
    }
}

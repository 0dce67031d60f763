//! The classifier contract and its deterministic backends.
//!
//! A classifier maps an input to a `(label, confidence)` pair with the
//! confidence strictly inside `(0, 1)`. Three backends exist:
//!
//! * [`HashClassifier`]: labels and confidences from two independent
//!   streams of a fixed 64-bit avalanche hash over the pixel bytes. It has
//!   no structure at all, which makes it the harshest test for soundness
//!   claims that must hold for any classifier.
//! * [`LinearClassifier`]: a seeded integer weight matrix followed by a
//!   temperature softmax.
//! * [`TableClassifier`]: predictions looked up by `(sample_id, variant)`,
//!   used to import outputs of real models.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cover::MaskSet;
use crate::defenders::MutantProfile;
use crate::tensor::{apply_mask, Image, TensorError};

/// Confidences are clamped into `[EPSILON, 1 - EPSILON]`.
pub const EPSILON: f64 = 1.0 / 65536.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("no prediction for sample {sample_id:?} variant {variant}")]
    MissingKey { sample_id: String, variant: Variant },
    #[error("classifier backend {0} needs image content")]
    MissingImage(&'static str),
    #[error("confidence {0} outside the open interval (0, 1)")]
    Confidence(f64),
    #[error("label {label} outside 0..{num_labels}")]
    Label { label: usize, num_labels: usize },
    #[error("a classifier needs at least two labels, got {0}")]
    TooFewLabels(usize),
    #[error("weight matrix does not match the input: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("failed to load prediction table: {0}")]
    Table(String),
}

/// Top-1 prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn new(label: usize, confidence: f64) -> Result<Self, ClassifyError> {
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(ClassifyError::Confidence(confidence));
        }
        Ok(Self { label, confidence })
    }
}

pub fn clamp_confidence(c: f64) -> f64 {
    c.clamp(EPSILON, 1.0 - EPSILON)
}

/// Which input of a sample is being classified: the sample itself or its
/// mutant under a given mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    #[serde(untagged)]
    Mask { mask_index: usize },
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Base => f.write_str("base"),
            Variant::Mask { mask_index } => write!(f, "mask {mask_index}"),
        }
    }
}

/// Everything a backend may look at. Content-based backends need `image`;
/// the table backend only uses the key.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub sample_id: &'a str,
    pub variant: Variant,
    pub image: Option<&'a Image>,
}

impl<'a> Query<'a> {
    pub fn image(image: &'a Image) -> Self {
        Self {
            sample_id: "",
            variant: Variant::Base,
            image: Some(image),
        }
    }
}

pub trait Classifier: Send + Sync {
    fn num_labels(&self) -> usize;

    fn classify(&self, query: &Query<'_>) -> Result<Prediction, ClassifyError>;

    fn name(&self) -> &'static str;
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Keyed 64-bit hash of a byte string. Distinct `stream` values give
/// independent hash functions.
pub fn hash_bytes(bytes: &[u8], seed: u64, stream: u64) -> u64 {
    let mut h = mix64(seed ^ mix64(stream.wrapping_add(1).wrapping_mul(GOLDEN)));
    let mut chunks = bytes.chunks_exact(8);
    for chunk in &mut chunks {
        let word = u64::from_le_bytes(chunk.try_into().unwrap());
        h = mix64(h ^ word).wrapping_add(GOLDEN);
    }
    let rest = chunks.remainder();
    if !rest.is_empty() {
        let mut buf = [0u8; 8];
        buf[..rest.len()].copy_from_slice(rest);
        h = mix64(h ^ u64::from_le_bytes(buf)).wrapping_add(GOLDEN);
    }
    mix64(h ^ bytes.len() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashClassifier {
    seed: u64,
    num_labels: usize,
}

impl HashClassifier {
    pub fn new(seed: u64, num_labels: usize) -> Result<Self, ClassifyError> {
        if num_labels < 2 {
            return Err(ClassifyError::TooFewLabels(num_labels));
        }
        Ok(Self { seed, num_labels })
    }

    pub fn predict(&self, image: &Image) -> Prediction {
        let label = (hash_bytes(image.pixels(), self.seed, 0) % self.num_labels as u64) as usize;
        let raw = hash_bytes(image.pixels(), self.seed, 1) % 65536;
        let confidence = clamp_confidence((1.0 + raw as f64) / 65538.0);
        Prediction { label, confidence }
    }
}

impl Classifier for HashClassifier {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn classify(&self, query: &Query<'_>) -> Result<Prediction, ClassifyError> {
        let image = query.image.ok_or(ClassifyError::MissingImage("hash"))?;
        Ok(self.predict(image))
    }

    fn name(&self) -> &'static str {
        "hash"
    }
}

/// Integer-weight linear model with a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    num_labels: usize,
    weights: Weights,
    temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    /// `w[label][input] = (mix(seed, label, input) mod 9) - 4`, defined for
    /// any input length.
    Seeded(u64),
    Explicit(Vec<Vec<i64>>),
}

impl LinearClassifier {
    pub fn seeded(seed: u64, num_labels: usize) -> Result<Self, ClassifyError> {
        if num_labels < 2 {
            return Err(ClassifyError::TooFewLabels(num_labels));
        }
        Ok(Self {
            num_labels,
            weights: Weights::Seeded(seed),
            temperature: None,
        })
    }

    /// One row of weights per label.
    pub fn from_weights(weights: Vec<Vec<i64>>, temperature: f64) -> Result<Self, ClassifyError> {
        if weights.len() < 2 {
            return Err(ClassifyError::TooFewLabels(weights.len()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ClassifyError::Weights(format!("temperature {temperature}")));
        }
        let n = weights[0].len();
        if weights.iter().any(|row| row.len() != n) {
            return Err(ClassifyError::Weights("ragged rows".into()));
        }
        Ok(Self {
            num_labels: weights.len(),
            weights: Weights::Explicit(weights),
            temperature: Some(temperature),
        })
    }

    fn weight(&self, label: usize, input: usize) -> i64 {
        match &self.weights {
            Weights::Seeded(seed) => {
                let h = mix64(seed ^ mix64(((label as u64) << 32) ^ input as u64 ^ GOLDEN));
                (h % 9) as i64 - 4
            }
            Weights::Explicit(w) => w[label][input],
        }
    }

    /// Default temperature scales logits to roughly unit spread.
    fn temperature_for(&self, image: &Image) -> f64 {
        self.temperature.unwrap_or_else(|| {
            let span = f64::from(image.alphabet().max(2) - 1);
            (span * (image.pixels().len() as f64).sqrt() / 2.0).max(1.0)
        })
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<i64>, ClassifyError> {
        if let Weights::Explicit(w) = &self.weights {
            if w[0].len() != image.pixels().len() {
                return Err(ClassifyError::Weights(format!(
                    "{} weights per label, {} inputs",
                    w[0].len(),
                    image.pixels().len()
                )));
            }
        }
        Ok((0..self.num_labels)
            .map(|l| {
                image
                    .pixels()
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| self.weight(l, i) * i64::from(p))
                    .sum()
            })
            .collect())
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction, ClassifyError> {
        let logits = self.logits(image)?;
        // first maximum wins ties
        let (label, &best) = logits
            .iter()
            .enumerate()
            .fold((0, &logits[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let t = self.temperature_for(image);
        let denom: f64 = logits
            .iter()
            .map(|&l| ((l - best) as f64 / t).exp())
            .sum();
        Ok(Prediction {
            label,
            confidence: clamp_confidence(1.0 / denom),
        })
    }
}

impl Classifier for LinearClassifier {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn classify(&self, query: &Query<'_>) -> Result<Prediction, ClassifyError> {
        let image = query.image.ok_or(ClassifyError::MissingImage("linear"))?;
        self.predict(image)
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

/// One row of a prediction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub variant: Variant,
    pub label: usize,
    pub confidence: f64,
}

/// Read-only `(sample_id, variant) -> Prediction` index.
#[derive(Debug, Clone, Default)]
pub struct TableClassifier {
    num_labels: usize,
    index: HashMap<(String, Variant), Prediction>,
}

impl TableClassifier {
    /// Builds the index; rows must have unique keys and valid confidences.
    pub fn from_rows(rows: impl IntoIterator<Item = PredictionRow>) -> Result<Self, ClassifyError> {
        let mut index = HashMap::new();
        let mut max_label = 0;
        for row in rows {
            let p = Prediction::new(row.label, row.confidence)?;
            max_label = max_label.max(row.label);
            let key = (row.sample_id, row.variant);
            if index.contains_key(&key) {
                return Err(ClassifyError::Table(format!(
                    "duplicate key ({:?}, {})",
                    key.0, key.1
                )));
            }
            index.insert(key, p);
        }
        Ok(Self {
            num_labels: (max_label + 1).max(2),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn lookup(&self, sample_id: &str, variant: Variant) -> Result<Prediction, ClassifyError> {
        self.index
            .get(&(sample_id.to_owned(), variant))
            .copied()
            .ok_or_else(|| ClassifyError::MissingKey {
                sample_id: sample_id.to_owned(),
                variant,
            })
    }

    /// Sorted ids of all rows whose sample id starts with `prefix`.
    pub fn sample_ids_with_prefix(&self, prefix: &str) -> Vec<String> {
        let mut ids: Vec<String> = self
            .index
            .keys()
            .filter(|(id, v)| *v == Variant::Base && id.starts_with(prefix))
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }
}

impl Classifier for TableClassifier {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn classify(&self, query: &Query<'_>) -> Result<Prediction, ClassifyError> {
        self.lookup(query.sample_id, query.variant)
    }

    fn name(&self) -> &'static str {
        "table"
    }
}

/// Serializable classifier choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierSpec {
    Hash { seed: u64, num_labels: usize },
    Linear { seed: u64, num_labels: usize },
    Table { source: PathBuf },
}

/// A constructed backend; keeps the table variant reachable for
/// table-driven attack checks.
pub enum BoundClassifier {
    Hash(HashClassifier),
    Linear(LinearClassifier),
    Table(TableClassifier),
}

impl BoundClassifier {
    pub fn as_dyn(&self) -> &dyn Classifier {
        match self {
            BoundClassifier::Hash(c) => c,
            BoundClassifier::Linear(c) => c,
            BoundClassifier::Table(c) => c,
        }
    }

    pub fn as_table(&self) -> Option<&TableClassifier> {
        match self {
            BoundClassifier::Table(t) => Some(t),
            _ => None,
        }
    }
}

impl ClassifierSpec {
    pub fn build(&self) -> Result<BoundClassifier, ClassifyError> {
        Ok(match self {
            ClassifierSpec::Hash { seed, num_labels } => {
                BoundClassifier::Hash(HashClassifier::new(*seed, *num_labels)?)
            }
            ClassifierSpec::Linear { seed, num_labels } => {
                BoundClassifier::Linear(LinearClassifier::seeded(*seed, *num_labels)?)
            }
            ClassifierSpec::Table { source } => {
                let rows = crate::dataset_io::load_predictions(source)
                    .map_err(|e| ClassifyError::Table(e.to_string()))?;
                BoundClassifier::Table(TableClassifier::from_rows(rows)?)
            }
        })
    }
}

/// Classify a sample and each of its mutants, one per mask in set order.
pub fn classify_mutants(
    classifier: &dyn Classifier,
    sample_id: &str,
    image: Option<&Image>,
    set: &MaskSet,
) -> Result<MutantProfile, ClassifyError> {
    let base = classifier.classify(&Query {
        sample_id,
        variant: Variant::Base,
        image,
    })?;
    let mut mutants = Vec::with_capacity(set.len());
    for (mask_index, mask) in set.masks.iter().enumerate() {
        let mutant = image.map(|img| apply_mask(img, mask)).transpose()?;
        mutants.push(classifier.classify(&Query {
            sample_id,
            variant: Variant::Mask { mask_index },
            image: mutant.as_ref(),
        })?);
    }
    Ok(MutantProfile { base, mutants })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cover::gen_square_cover;
    use crate::tensor::Mask;

    fn img(pixels: Vec<u8>) -> Image {
        Image::new(2, 2, 1, 4, pixels).unwrap()
    }

    #[test]
    fn hash_is_deterministic() {
        let c = HashClassifier::new(7, 5).unwrap();
        let x = img(vec![1, 2, 3, 0]);
        assert_eq!(c.predict(&x), c.predict(&x.clone()));
        assert_ne!(
            HashClassifier::new(8, 5).unwrap().predict(&x),
            c.predict(&x)
        );
    }

    #[test]
    fn hash_known_values() {
        // frozen so that cross-platform drift is caught
        assert_eq!(mix64(0), 0);
        assert_eq!(mix64(1), 0x5692_161d_100b_05e5);
        let h = hash_bytes(&[0, 1, 2, 3, 4, 5, 6, 7, 8], 7, 0);
        assert_eq!(h, hash_bytes(&[0, 1, 2, 3, 4, 5, 6, 7, 8], 7, 0));
        assert_ne!(h, hash_bytes(&[0, 1, 2, 3, 4, 5, 6, 7, 8], 7, 1));
        assert_ne!(hash_bytes(&[0], 7, 0), hash_bytes(&[0, 0], 7, 0));
    }

    #[test]
    fn hash_confidence_bounds() {
        let c = HashClassifier::new(3, 2).unwrap();
        for a in 0..4u8 {
            for b in 0..4u8 {
                let p = c.predict(&img(vec![a, b, 0, 1]));
                assert!(p.confidence >= EPSILON && p.confidence <= 1.0 - EPSILON);
                assert!(p.confidence > 1.0 / 65538.0 && p.confidence < 65537.0 / 65538.0);
                assert!(p.label < 2);
            }
        }
    }

    #[test]
    fn linear_tie_breaks_low() {
        let c = LinearClassifier::from_weights(vec![vec![1], vec![0]], 1.0).unwrap();
        let x = Image::new(1, 1, 1, 4, vec![0]).unwrap();
        let p = c.predict(&x).unwrap();
        assert_eq!(p.label, 0);
        assert_eq!(p.confidence, 0.5);
        let p = c.predict(&Image::new(1, 1, 1, 4, vec![2]).unwrap()).unwrap();
        // logits (2, 0): softmax max = 1 / (1 + e^-2)
        assert_eq!(p.label, 0);
        assert!((p.confidence - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn linear_clamps_saturated_softmax() {
        let c = LinearClassifier::from_weights(vec![vec![0], vec![1000]], 1.0).unwrap();
        let p = c.predict(&Image::new(1, 1, 1, 4, vec![3]).unwrap()).unwrap();
        assert_eq!(p.label, 1);
        assert_eq!(p.confidence, 1.0 - EPSILON);
    }

    #[test]
    fn linear_seeded_is_stable() {
        let c = LinearClassifier::seeded(11, 4).unwrap();
        let x = Image::new(3, 3, 1, 16, (0..9).collect()).unwrap();
        let p = c.predict(&x).unwrap();
        assert_eq!(p, c.predict(&x).unwrap());
        assert!(p.confidence > 0.0 && p.confidence < 1.0);
        assert!(matches!(
            LinearClassifier::from_weights(vec![vec![1, 2]; 2], 1.0)
                .unwrap()
                .predict(&x),
            Err(ClassifyError::Weights(_))
        ));
    }

    #[test]
    fn too_few_labels() {
        assert!(HashClassifier::new(1, 1).is_err());
        assert!(LinearClassifier::seeded(1, 0).is_err());
    }

    #[test]
    fn mutant_profile_shape() {
        let set = gen_square_cover((8, 8), 2, 3).unwrap();
        let c = HashClassifier::new(7, 5).unwrap();
        let x = Image::new(8, 8, 1, 4, (0..64).map(|v| (v % 4) as u8).collect()).unwrap();
        let profile = classify_mutants(&c, "s", Some(&x), &set).unwrap();
        assert_eq!(profile.mutants.len(), 9);
        assert_eq!(profile.base, c.predict(&x));
        for (m, p) in set.masks.iter().zip(&profile.mutants) {
            assert_eq!(*p, c.predict(&apply_mask(&x, m).unwrap()));
        }
    }

    #[test]
    fn full_mask_mutants_coincide() {
        let set = MaskSet {
            masks: vec![Mask::full(2, 2).unwrap()],
            spec: crate::tensor::PatchSpec::square((2, 2), 2).unwrap(),
            masks_per_axis: 1,
            compound: false,
        };
        let c = HashClassifier::new(1, 3).unwrap();
        let a = classify_mutants(&c, "a", Some(&img(vec![1, 2, 3, 0])), &set).unwrap();
        let b = classify_mutants(&c, "b", Some(&img(vec![3, 3, 1, 1])), &set).unwrap();
        assert_eq!(a.mutants, b.mutants);
    }

    #[test]
    fn table_lookup_and_missing_key() {
        let rows = vec![
            PredictionRow {
                sample_id: "x".into(),
                variant: Variant::Base,
                label: 0,
                confidence: 0.7,
            },
            PredictionRow {
                sample_id: "x".into(),
                variant: Variant::Mask { mask_index: 0 },
                label: 1,
                confidence: 0.5,
            },
        ];
        let t = TableClassifier::from_rows(rows.clone()).unwrap();
        assert_eq!(t.lookup("x", Variant::Base).unwrap().confidence, 0.7);
        assert!(matches!(
            t.lookup("x", Variant::Mask { mask_index: 1 }),
            Err(ClassifyError::MissingKey { .. })
        ));
        let mut dup = rows.clone();
        dup.push(rows[0].clone());
        assert!(TableClassifier::from_rows(dup).is_err());
    }

    #[test]
    fn variant_json() {
        assert_eq!(serde_json::to_string(&Variant::Base).unwrap(), "\"base\"");
        assert_eq!(
            serde_json::to_string(&Variant::Mask { mask_index: 3 }).unwrap(),
            "{\"mask_index\":3}"
        );
        let v: Variant = serde_json::from_str("{\"mask_index\":2}").unwrap();
        assert_eq!(v, Variant::Mask { mask_index: 2 });
    }
}

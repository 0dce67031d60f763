//! Certified detection against adversarial patches.
//!
//! Building blocks:
//!
//! * [`tensor`]: images, rectangular masks and patch placements.
//! * [`cover`]: covering mask sets and their exhaustive verification.
//! * [`classifier`]: deterministic stand-in classifiers and prediction tables.
//! * [`defenders`]: certification and warning functions (HiCert, PG++,
//!   D_OMA and variants).
//! * [`attack`]: the soundness oracle that enumerates patched variants.
//! * [`metrics`]: exact evaluation metrics and the eight-case taxonomy.
//! * [`dataset_io`]: synthetic data and file formats.
//!
//! Loops over large index spaces go through [`exec`], which uses rayon when
//! the `parallel` feature is enabled and runs sequentially otherwise.

pub mod attack;
pub mod classifier;
pub mod cover;
pub mod dataset_io;
pub mod defenders;
pub mod exec;
pub mod metrics;
pub mod tensor;

pub use attack::{AttackConfig, AttackError, AttackMode, Checks, SoundnessReport};
pub use classifier::{Classifier, ClassifierSpec, Prediction, Variant};
pub use cover::{verify_cover, MaskSet};
pub use dataset_io::{DataError, DatasetRecord};
pub use defenders::{Defender, DefenderKind, DefenderSpec, MutantProfile, Verdict};
pub use exec::Parallelism;
pub use metrics::{compute_metrics, EvalRecord, MetricsReport};
pub use tensor::{Image, Mask, PatchSpec, Placement, Rect};

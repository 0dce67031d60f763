//! Run configuration files. Flags given on the command line win over
//! values read here.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use patchcert::attack::DEFAULT_BUDGET;
use patchcert::ClassifierSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Exhaustive,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// Certified samples: every harmful variant is warned.
    Def1,
    /// A harmful variant under a consistent covering mask shows a label difference.
    Thm1,
    /// Attribute each detected variant to the label-difference or
    /// low-confidence clause.
    Thm2Paths,
    /// Defense success ratio over all samples.
    Rsuc,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub mode: Option<Mode>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub budget: Option<u64>,
    pub alphabet_override: Option<u16>,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MaskgenParams {
    pub patch_size: usize,
    pub masks_per_axis: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub classifier: Option<ClassifierSpec>,
    /// `kind`, `kind:tau` or `certify=kind:tau,warn=kind:tau`.
    pub defender: Option<String>,
    pub taus: Option<Vec<f64>>,
    pub dataset: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub maskgen: Option<MaskgenParams>,
    pub attack: Option<AttackParams>,
    pub checks: Option<Vec<Check>>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
    pub timing: Option<bool>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.dataset);
        rebase(&mut cfg.masks);
        rebase(&mut cfg.out);
        if let Some(ClassifierSpec::Table { source }) = &mut cfg.classifier {
            if source.is_relative() {
                *source = base.join(&*source);
            }
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn attack(&self) -> AttackParams {
        self.attack.clone().unwrap_or_default()
    }
}

pub fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

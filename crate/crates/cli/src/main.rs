//! `patchcert` command-line driver.
//!
//! Exit codes: 0 success, 1 violations or coverage failure, 2 usage or
//! configuration error, 3 I/O or schema error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use patchcert::attack::AttackError;
use patchcert::classifier::ClassifyError;
use patchcert::dataset_io::{DataError, LabelMode};
use patchcert::Parallelism;

use crate::config::{Check, Mode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "patchcert", version, about = "Certified patch detection: mask sets, evaluation and soundness checks")]
struct Cli {
    /// Worker threads (1 runs sequentially).
    #[arg(long, global = true, env = "PATCHCERT_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a covering mask set and verify it.
    Maskgen(MaskgenArgs),
    /// Write a seeded synthetic dataset.
    GenData(GenDataArgs),
    /// Export base and mutant predictions as a prediction table.
    Predict(PredictArgs),
    /// Certify and warn over a dataset and report metrics.
    Evaluate(EvaluateArgs),
    /// Enumerate patched variants and check the soundness properties.
    Verify(VerifyArgs),
    /// Combine evaluation and soundness reports and print a summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct MaskgenArgs {
    #[arg(long, num_args = 2, value_names = ["H", "W"], required = true)]
    pub plane: Vec<usize>,
    /// Side of a square patch.
    #[arg(long, value_parser = positive, required_unless_present = "patch_area", conflicts_with = "patch_area")]
    pub patch_size: Option<usize>,
    /// Area budget of a rectangular patch.
    #[arg(long, value_parser = positive)]
    pub patch_area: Option<usize>,
    /// Number of disjoint square patches.
    #[arg(long, value_parser = positive, requires = "patch_size")]
    pub patches: Option<usize>,
    #[arg(long, value_parser = positive)]
    pub masks_per_axis: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], required = true)]
    pub plane: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub alphabet: u16,
    #[arg(long, default_value_t = 5)]
    pub num_labels: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LabelModeArg::ClassifierAligned)]
    pub label_mode: LabelModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LabelModeArg {
    ClassifierAligned,
    Uniform,
}

impl From<LabelModeArg> for LabelMode {
    fn from(m: LabelModeArg) -> Self {
        match m {
            LabelModeArg::ClassifierAligned => LabelMode::ClassifierAligned,
            LabelModeArg::Uniform => LabelMode::Uniform,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum ClassifierKindArg {
    Hash,
    Linear,
}

#[derive(Args, Debug, Default)]
pub struct ClassifierArgs {
    /// Built-in classifier.
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierKindArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    /// Use a prediction table instead of a built-in classifier.
    #[arg(long, conflicts_with = "classifier")]
    pub predictions: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct MaskArgs {
    /// Mask set file.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Generate a square cover instead.
    #[arg(long, conflicts_with = "masks")]
    pub patch_size: Option<usize>,
    #[arg(long, conflicts_with = "masks")]
    pub masks_per_axis: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub masks: MaskArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub masks: MaskArgs,
    /// doma | c2 | pgpp | hicert | hicert_flip | pgpp_flip, optionally
    /// `kind:tau`, or `certify=..,warn=..`.
    #[arg(long)]
    pub defender: Option<String>,
    /// Threshold; repeat or list several for a sweep.
    #[arg(long = "tau", num_args = 1.., action = clap::ArgAction::Append)]
    pub taus: Vec<f64>,
    /// Report file (single report only).
    #[arg(long, conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Directory for one report per threshold.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Print per-sample wall time to stderr.
    #[arg(long)]
    pub timing: bool,
    /// Include per-sample records in the report.
    #[arg(long)]
    pub with_records: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    /// Dataset file; defaults to a synthetic 8x8 desk dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub masks: MaskArgs,
    /// Number of samples (desk dataset size, or a prefix of --dataset).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub defender: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Separate certification and warning functions, e.g.
    /// `certify=hicert:0.8,warn=doma`.
    #[arg(long)]
    pub defender_override: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub trials: Option<u64>,
    #[arg(long)]
    pub attack_seed: Option<u64>,
    /// Classifier calls allowed per sample in exhaustive mode.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Restrict patch content to values below this.
    #[arg(long)]
    pub alphabet: Option<u16>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub checks: Vec<Check>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report written by `evaluate`.
    #[arg(long)]
    pub evaluation: PathBuf,
    /// Report written by `verify`.
    #[arg(long)]
    pub soundness: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Exit(pub u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Exit(code)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if cause.downcast_ref::<DataError>().is_some_and(|e| !matches!(e, DataError::Invalid(_)))
            || cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 3;
        }
        let missing = |e: &ClassifyError| matches!(e, ClassifyError::MissingKey { .. } | ClassifyError::Table(_));
        if cause.downcast_ref::<ClassifyError>().is_some_and(missing) {
            return 3;
        }
        if let Some(AttackError::Classify(e)) = cause.downcast_ref::<AttackError>() {
            if missing(e) {
                return 3;
            }
        }
    }
    2
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe))
}

fn config_path(cmd: &Command) -> Option<&PathBuf> {
    match cmd {
        Command::Evaluate(a) => a.config.as_ref(),
        Command::Verify(a) => a.config.as_ref(),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let cfg_workers = match config_path(&cli.command) {
        Some(p) => RunConfig::load(p)?.workers,
        None => None,
    };
    let workers = cli.workers.or(cfg_workers);
    if workers == Some(0) {
        anyhow::bail!("--workers must be positive");
    }
    let par = if workers == Some(1) {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    pool.install(|| match cli.command {
        Command::Maskgen(a) => commands::maskgen(a, par),
        Command::GenData(a) => commands::gen_data(a),
        Command::Predict(a) => commands::predict(a, par),
        Command::Evaluate(a) => commands::evaluate(a, par),
        Command::Verify(a) => commands::verify(a, par),
        Command::Report(a) => commands::report(a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) if broken_pipe(&err) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

//! Command-line driver for the scenario testing cycle.
//!
//! Every subcommand maps onto one operation of `scenario-core`; `serve`
//! additionally exposes a workspace over HTTP for the triage front end.

pub mod commands;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use scenario_core::coverage::CoverageCriterion;
use scenario_core::datamorph::Operator;

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Exit status for domain errors and unmet checks.
pub const EXIT_DOMAIN: i32 = 1;
/// Exit status for malformed invocations.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] scenario_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DOMAIN,
        }
    }
}

macro_rules! core_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_error!(
    scenario_core::dataset::DatasetError,
    scenario_core::datamorph::DatamorphError,
    scenario_core::coverage::CoverageError,
    scenario_core::modelrun::ModelRunError,
    scenario_core::evaluate::EvalError,
    scenario_core::treatment::TreatmentError,
    scenario_core::triage::TriageError,
    scenario_core::report::ReportError,
    scenario_core::config::ConfigError
);

#[derive(Debug, Parser)]
#[command(name = "scenario", version, about = "Scenario-based testing, diagnosis and treatment of ML perception models")]
pub struct Cli {
    /// Workspace directory; its scenario.toml supplies defaults.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// Configuration file to use instead of <workspace>/scenario.toml.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate mutant test cases satisfying a coverage criterion.
    Mutate(MutateArgs),
    /// Measure a test set against a coverage criterion; exits 1 when unsatisfied.
    Coverage(CoverageArgs),
    /// Run an external model command over a manifest.
    Run(RunArgs),
    /// Bind existing prediction files to a manifest.
    Ingest(IngestArgs),
    /// Per-scenario and per-class metrics of a run.
    Eval(EvalArgs),
    /// Bootstrap test of suspected weak scenarios or classes.
    Diagnose(DiagnoseArgs),
    /// Plan (and emit) a treatment training set.
    Plan(PlanArgs),
    /// Compare two scenario reports and flag forgetting.
    Compare(CompareArgs),
    /// Serve a workspace over HTTP for triage.
    Serve(ServeArgs),
    /// Re-render a stored report as JSON or HTML.
    Report(ReportArgs),
    /// Inspect or apply image operators.
    #[command(subcommand)]
    Morph(MorphCommand),
    /// Write a synthetic cone corpus.
    Toy(ToyArgs),
    /// Run the bundled colour-threshold detector.
    StubDetect(StubDetectArgs),
}

#[derive(Debug, Args)]
pub struct MutateArgs {
    /// first, kth:K or combo:J
    #[arg(long, default_value = "first")]
    pub criterion: CoverageCriterion,
    /// Comma-separated operators; defaults to the seven scenario operators.
    #[arg(long, value_delimiter = ',')]
    pub operators: Option<Vec<Operator>>,
    /// Master seed; defaults to the workspace seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed manifest.
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    /// Output directory for images/ and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Parameter override such as fog.f=0.5 (repeatable).
    #[arg(long = "set", value_name = "OP.PARAM=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    #[arg(long, default_value = "first")]
    pub criterion: CoverageCriterion,
    #[arg(long, value_delimiter = ',')]
    pub operators: Option<Vec<Operator>>,
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Command template with {image} and {out} placeholders, run through sh.
    #[arg(long = "cmd", value_name = "TEMPLATE")]
    pub command: String,
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    #[arg(long = "model", visible_alias = "model-id", value_name = "ID")]
    pub model_id: String,
    /// Run directory; receives prediction files and run.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Per-invocation timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Invoke the command once with a list file instead of once per image.
    #[arg(long)]
    pub batch: bool,
    /// Concurrent invocations.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of <image_id>.pred files or a predictions.json.
    #[arg(long, visible_alias = "pred", value_name = "DIR")]
    pub preds: PathBuf,
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    #[arg(long = "model", visible_alias = "model-id", value_name = "ID")]
    pub model_id: String,
    /// Run directory for run.json; defaults to the predictions directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory or run.json.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Triage file whose unrecognizable marks apply before scoring.
    #[arg(long)]
    pub triage: Option<PathBuf>,
    /// report.json or report.html; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json or html; inferred from --out otherwise.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long = "in", value_name = "MANIFEST")]
    pub input: PathBuf,
    /// Comma-separated suspects (fog, scenario:fog, class:orange) or from-triage.
    #[arg(long)]
    pub suspects: String,
    /// Triage file read by --suspects from-triage.
    #[arg(long)]
    pub triage: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Compare against this mAP (percent) instead of the run's overall mAP.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlanMode {
    /// One plan per synthetic fraction, sharing the rehearsal sample.
    Sweep,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// `sweep` plans every fraction of --p (a start:end:step range or a comma list).
    #[arg(value_enum)]
    pub mode: Option<PlanMode>,
    /// Training manifest.
    #[arg(long = "in", visible_alias = "train", value_name = "MANIFEST")]
    pub input: PathBuf,
    /// Fraction of the training set to augment [default: 0.30, or 0.10:0.50:0.10 for sweep].
    #[arg(long = "synthetic", visible_alias = "p", value_name = "P")]
    pub synthetic: Option<String>,
    /// Fraction of the training set kept as rehearsal.
    #[arg(long = "rehearsal", visible_alias = "r", default_value_t = 0.10, value_name = "R")]
    pub rehearsal: f64,
    /// Comma-separated target operators.
    #[arg(long, value_delimiter = ',', required = true)]
    pub target: Vec<Operator>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model the plan treats.
    #[arg(long = "base-model", visible_alias = "base", default_value = "M0")]
    pub base_model: String,
    /// Draw synthetic sources only from images not used for rehearsal.
    #[arg(long)]
    pub disjoint: bool,
    /// Print the plan without writing images.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long, value_name = "DIR", required_unless_present = "dry_run")]
    pub out: Option<PathBuf>,
    #[arg(long = "set", value_name = "OP.PARAM=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Comma-separated treated suspects.
    #[arg(long, default_value = "")]
    pub treated: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory of built front-end assets.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Stored report (scenario, diagnosis or comparison JSON).
    #[arg(long = "in", value_name = "REPORT")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum MorphCommand {
    /// List registered operators and their parameters.
    List,
    /// Apply one operator chain to a single image.
    Apply(MorphApplyArgs),
}

#[derive(Debug, Args)]
pub struct MorphApplyArgs {
    /// Comma-separated chain, applied left to right.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ops: Vec<Operator>,
    #[arg(long = "in", value_name = "IMAGE")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set", value_name = "OP.PARAM=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub images: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StubVariant {
    /// Ignores orange pixels.
    Blind,
    /// Detects all three cone colours.
    Aware,
}

#[derive(Debug, Args)]
pub struct StubDetectArgs {
    #[arg(long, value_enum, default_value = "blind")]
    pub variant: StubVariant,
    /// Single image mode: write its predictions to --out.
    #[arg(long, conflicts_with_all = ["input", "model_id", "degrade"])]
    pub image: Option<PathBuf>,
    /// Manifest mode: detect on every image and write <out>/run.json.
    #[arg(long = "in", value_name = "MANIFEST", requires = "model_id")]
    pub input: Option<PathBuf>,
    #[arg(long = "model", value_name = "ID")]
    pub model_id: Option<String>,
    /// Drop every detection on this scenario (manifest mode).
    #[arg(long)]
    pub degrade: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\nFor more information, try 'scenario --help'.");
            }
            e.exit_code()
        }
    }
}

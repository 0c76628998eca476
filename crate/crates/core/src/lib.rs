//! Scenario-based testing of machine-learning perception models.
//!
//! The crate covers the whole test-diagnose-treat cycle: datasets and their
//! manifests, seeded image transformations that turn test data of one
//! operating condition into another, combinatorial coverage of mutant
//! sets, running or ingesting model predictions, scenario-level metrics with
//! bootstrap diagnosis, and planning of treatment training sets.

pub mod config;
pub mod coverage;
pub mod datamorph;
pub mod dataset;
pub mod evaluate;
pub mod modelrun;
pub mod report;
pub mod toy;
pub mod treatment;
pub mod triage;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{Layout, WorkspaceConfig};
pub use coverage::{measure_coverage, plan_mutants, CoverageCriterion, CoverageReport, MutantPlan};
pub use datamorph::{
    apply_datamorphism, compose_chain, derive_case_seed, DatamorphChain, DatamorphismSpec, Operator, PixelImage,
};
pub use dataset::{
    class_stats, load_manifest, merge_manifests, sample_fraction, save_manifest, Annotation, BBox, ClassLabel,
    DatasetManifest,
};
pub use evaluate::{
    average_precision, bootstrap_ci, compare, diagnose, evaluate_report, iou, match_detections, ComparisonReport,
    DiagnosisConfig, DiagnosisReport, MatchSet, ScenarioReport, Suspect,
};
pub use modelrun::{ingest_predictions, load_run, run_model, save_run, Detection, ModelRunManifest, RunnerConfig};
pub use report::{emit_report, AnyReport, ReportFormat};
pub use treatment::{emit_treatment, plan_treatment, sweep, MixtureSpec, TreatmentPlan};
pub use triage::{TriageEntry, TriageFile};

/// Union of the module errors, for callers that drive several stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Datamorph(#[from] datamorph::DatamorphError),
    #[error(transparent)]
    Coverage(#[from] coverage::CoverageError),
    #[error(transparent)]
    ModelRun(#[from] modelrun::ModelRunError),
    #[error(transparent)]
    Eval(#[from] evaluate::EvalError),
    #[error(transparent)]
    Treatment(#[from] treatment::TreatmentError),
    #[error(transparent)]
    Triage(#[from] triage::TriageError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}

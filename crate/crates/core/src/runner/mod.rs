//! Experiment orchestration: retrieval, perturbation, prompting, generation,
//! parsing and scoring, with resumable results files and reports.

mod annotation;
mod config;
mod execute;
mod record;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use annotation::{run_annotation, run_annotation_with, AnnotateConfig, AnnotateResources, AnnotateSummary};
pub use config::{Perturbation, RunConfig, RunMode};
pub use execute::{build_index, execute, run, run_decomposed, RunContext, RunSummary};
pub use record::{
    read_results, PerturbationRecord, ResultRecord, RetrievedDoc, RunLogEntry, RunStatus, TraceSummary,
};
pub use report::{
    agreement_report, render_report_text, report, AgreementReport, DeltaRow, DeltaTable, RunReport, RunTable,
};

use crate::annotate::AnnotateError;
use crate::dataset::DatasetError;
use crate::gateway::GatewayError;
use crate::index::IndexError;
use crate::metrics::MetricsError;
use crate::perturb::PerturbError;
use crate::prompts::PromptError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("query embeddings have dimension {found}, index dimension is {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("results files do not share a schema: {0}")]
    SchemaMismatch(String),
    #[error("group {0} is not covered by all three results files")]
    GroupCoverageMismatch(String),
    #[error("{path}: line {line_no}: {reason}")]
    MalformedResults { path: PathBuf, line_no: usize, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `<path><suffix>`, e.g. `results.jsonl.manifest.json`.
pub(crate) fn sidecar(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Default cache location: `drag_cache.jsonl` next to the output file.
pub fn default_cache_path(output: &std::path::Path) -> PathBuf {
    output
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("drag_cache.jsonl"), |d| d.join("drag_cache.jsonl"))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = sidecar(path, ".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

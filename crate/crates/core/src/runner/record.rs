use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunError, RunMode};
use crate::metrics::ScoredRecord;
use crate::parser::{DocVerdict, FailureReason, ParseReport, Section};
use crate::perturb::Insertion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub kind: String,
    /// Document ids in the order shown to the model.
    pub presented: Vec<String>,
    #[serde(default)]
    pub insertions: Vec<Insertion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub sections_found: BTreeSet<Section>,
    pub citations: Vec<u32>,
    pub verdicts: Vec<DocVerdict>,
    pub failure_reasons: Vec<FailureReason>,
}

impl TraceSummary {
    pub fn new(report: &ParseReport, verdicts: Vec<DocVerdict>) -> Self {
        Self {
            sections_found: report.sections_found.clone(),
            citations: report.citations.clone(),
            verdicts,
            failure_reasons: report.failure_reasons.clone(),
        }
    }
}

/// One scored inference. Contains everything needed to recompute metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    pub lang: String,
    pub mode: RunMode,
    #[serde(default)]
    pub ablated_steps: Vec<u8>,
    pub argumentation_language: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub retrieved: Vec<RetrievedDoc>,
    #[serde(default)]
    pub perturbation: Option<PerturbationRecord>,
    /// Cache key of the final generation request.
    #[serde(default)]
    pub prompt_fingerprint: Option<String>,
    pub raw_output: String,
    /// Per-step outputs of a decomposed run.
    #[serde(default)]
    pub step_outputs: Vec<String>,
    #[serde(default)]
    pub trace: Option<TraceSummary>,
    pub final_answer: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub controller: Option<String>,
    /// Strings the answer is scored against.
    pub targets: Vec<String>,
    pub flexible_match: bool,
    pub strict_match: bool,
    #[serde(default)]
    pub language_ok: Option<bool>,
    #[serde(default)]
    pub if_pass: Option<bool>,
}

impl ResultRecord {
    pub fn scored(&self) -> ScoredRecord {
        ScoredRecord {
            query_id: self.query_id.clone(),
            lang: self.lang.clone(),
            answer_text: self.final_answer.clone(),
            gold_answers: self.gold_answers.clone(),
            controller: self.controller.clone(),
            flexible_match: self.flexible_match,
            strict_match: self.strict_match,
            language_ok: self.language_ok,
            if_pass: self.if_pass,
        }
    }

    /// Compact JSON line without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("result record serialization is infallible")
    }
}

/// Timing and cache data kept out of the canonical results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub query_id: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub status: RunStatus,
}

/// Reads a results file strictly.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>, RunError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RunError::MalformedResults {
                path: path.to_path_buf(),
                line_no: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Reads the parsable records of a possibly interrupted results file.
pub(crate) fn read_results_lenient(path: &Path) -> Result<Vec<ResultRecord>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping unreadable line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

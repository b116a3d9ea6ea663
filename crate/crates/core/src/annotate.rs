//! Building fine-tuning corpora from teacher-generated dialectic traces.
//!
//! A candidate passes stage 1 when its trace is structurally complete and its
//! answer strictly matches a gold answer; stage 2 asks a judge model for a
//! binary `0`/`1` verdict. Survivors become [`Demonstration`]s.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QueryRecord;
use crate::gateway::{cached_generate, Backend, GatewayError, GenerationParams, RequestContext, ResponseCache};
use crate::index::DocumentRecord;
use crate::metrics::strict_match_target;
use crate::parser::{first_header_offset, parse_trace_with_docs, DialecticTrace, ParseError, ParseReport, Section};
use crate::perturb::Prng;
use crate::prompts::{PromptError, TemplateSet, Variation};
use crate::sync::parallel_map;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("judge answered {response:?} for {query_id}; expected 0 or 1")]
    JudgeProtocolViolation { query_id: String, response: String },
    #[error("no demonstrations to export")]
    NoDemonstrations,
    #[error("sampling fraction {0} keeps no demonstrations")]
    EmptyAfterSampling(f64),
    #[error("sampling fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Raw teacher output with its lenient parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<S> {
    pub query: QueryRecord,
    pub documents: Vec<DocumentRecord<S>>,
    pub raw: String,
    pub trace: DialecticTrace,
    pub report: ParseReport,
    pub prompt_text: String,
    pub teacher: String,
    pub generated_at: u64,
}

/// Trace and report for outputs the parser cannot split at all.
fn unparsed(raw: &str) -> (DialecticTrace, ParseReport) {
    let trace = DialecticTrace {
        extraction: String::new(),
        explanation: String::new(),
        argumentation: String::new(),
        answer: String::new(),
        verdicts: Vec::new(),
        segments: Vec::new(),
        raw: raw.to_string(),
    };
    let report = ParseReport {
        sections_found: Default::default(),
        citations: Vec::new(),
        if_pass: false,
        failure_reasons: Section::ALL
            .iter()
            .map(|s| crate::parser::FailureReason::MissingSection(*s))
            .collect(),
    };
    (trace, report)
}

/// Parses `raw` without failing; unusable outputs yield an empty trace.
pub fn lenient_parse(raw: &str, n_docs: Option<usize>) -> (DialecticTrace, ParseReport) {
    match parse_trace_with_docs(raw, n_docs) {
        Ok(parsed) => parsed,
        Err(ParseError::EmptyOutput | ParseError::NoSectionsFound) => unparsed(raw),
    }
}

/// Asks the teacher for one dialectic trace through the cache.
pub fn generate_candidate<S: Clone>(
    teacher: &dyn Backend,
    cache: &ResponseCache,
    templates: &TemplateSet,
    query: &QueryRecord,
    docs: &[DocumentRecord<S>],
    params: &GenerationParams,
) -> Result<Candidate<S>, AnnotateError> {
    let prompt = templates.render_drag(query, docs, &Variation::default())?;
    let (raw, _) = cached_generate(cache, teacher, &prompt.messages, params, &RequestContext::for_query(&query.id))?;
    let (trace, report) = lenient_parse(&raw, Some(docs.len()));
    Ok(Candidate {
        query: query.clone(),
        documents: docs.to_vec(),
        raw,
        trace,
        report,
        prompt_text: prompt.text(),
        teacher: teacher.model_name().to_string(),
        generated_at: now_secs(),
    })
}

/// Keeps structurally valid candidates whose answer strictly matches a target.
pub fn filter_stage1<S>(candidate: &Candidate<S>) -> bool {
    let targets = candidate.query.scoring_targets();
    candidate.report.if_pass && strict_match_target(&candidate.trace.answer, &targets).is_some()
}

/// Judge verdict: `Ok(true)` for "1", `Ok(false)` for "0".
pub fn filter_stage2<S>(
    candidate: &Candidate<S>,
    judge: &dyn Backend,
    cache: &ResponseCache,
    templates: &TemplateSet,
    params: &GenerationParams,
) -> Result<bool, AnnotateError> {
    let targets = candidate.query.scoring_targets();
    let target = strict_match_target(&candidate.trace.answer, &targets)
        .cloned()
        .unwrap_or_else(|| targets.first().cloned().unwrap_or_default());
    let prompt = templates.render_judge(&candidate.raw, &target, &candidate.prompt_text)?;
    let ctx = RequestContext::for_query(&candidate.query.id);
    let (response, _) = cached_generate(cache, judge, &prompt.messages, params, &ctx)?;
    match response.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        _ => Err(AnnotateError::JudgeProtocolViolation {
            query_id: candidate.query.id.clone(),
            response,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher: String,
    pub judge: String,
    pub generated_at: u64,
    pub judged_at: u64,
    pub stage1_pass: bool,
    pub judge_verdict: String,
}

/// A filtered training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration<S> {
    pub query: QueryRecord,
    pub documents: Vec<DocumentRecord<S>>,
    pub trace: DialecticTrace,
    pub target: String,
    /// The generated text from the first section header on.
    pub training_text: String,
    pub provenance: Provenance,
}

/// Text from the first recognized header to the end, trailing whitespace removed.
fn training_slice(raw: &str) -> &str {
    raw[first_header_offset(raw).unwrap_or(0)..].trim_end()
}

impl<S: Clone> Demonstration<S> {
    /// Builds a demonstration from a candidate that passed both filters.
    pub fn from_candidate(candidate: &Candidate<S>, judge: &str) -> Self {
        let training_text = training_slice(&candidate.raw).to_string();
        // Stored exactly as `parse_trace(training_text)` yields it.
        let (trace, _) = lenient_parse(&training_text, None);
        let targets = candidate.query.scoring_targets();
        let target = strict_match_target(&trace.answer, &targets).cloned().unwrap_or_default();
        Self {
            query: candidate.query.clone(),
            documents: candidate.documents.clone(),
            trace,
            target,
            training_text,
            provenance: Provenance {
                teacher: candidate.teacher.clone(),
                judge: judge.to_string(),
                generated_at: candidate.generated_at,
                judged_at: now_secs(),
                stage1_pass: true,
                judge_verdict: "1".to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusVariant {
    /// Prompt plus full dialectic trace.
    Drag,
    /// Retrieval prompt plus the gold answer only.
    SftBaseline,
}

impl std::fmt::Display for CorpusVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorpusVariant::Drag => "drag",
            CorpusVariant::SftBaseline => "sft_baseline",
        })
    }
}

impl std::str::FromStr for CorpusVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drag" => Ok(CorpusVariant::Drag),
            "sft_baseline" => Ok(CorpusVariant::SftBaseline),
            other => Err(format!("unknown corpus variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftCorpus<S> {
    pub entries: Vec<Demonstration<S>>,
    pub variant: CorpusVariant,
}

impl<S: Clone> SftCorpus<S> {
    /// Entries are ordered by query id; the baseline variant replaces each
    /// training text with its matched target.
    pub fn new(mut entries: Vec<Demonstration<S>>, variant: CorpusVariant) -> Self {
        entries.sort_by(|a, b| a.query.id.cmp(&b.query.id));
        if variant == CorpusVariant::SftBaseline {
            for e in &mut entries {
                e.training_text = e.target.clone();
            }
        }
        Self { entries, variant }
    }

    pub fn language_histogram(&self) -> BTreeMap<String, usize> {
        let mut hist = BTreeMap::new();
        for e in &self.entries {
            *hist.entry(e.query.lang.clone()).or_insert(0) += 1;
        }
        hist
    }
}

/// One line of an exported corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt_text: String,
    pub training_text: String,
    pub query_id: String,
    pub lang: String,
    pub teacher: String,
    pub judge: String,
    pub variant: CorpusVariant,
}

/// Indices kept by a seeded subsample of `⌊fraction·n⌋` out of `n`, ascending.
pub fn sample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, AnnotateError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AnnotateError::InvalidFraction(fraction));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    if fraction < 1.0 {
        let keep = (fraction * n as f64).floor() as usize;
        Prng::new(seed).shuffle(&mut indices);
        indices.truncate(keep);
        indices.sort_unstable();
    }
    if indices.is_empty() {
        return Err(AnnotateError::EmptyAfterSampling(fraction));
    }
    Ok(indices)
}

/// Renders export records for a (possibly subsampled) corpus, ordered by query id.
pub fn export_records<S: Clone>(
    corpus: &SftCorpus<S>,
    templates: &TemplateSet,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ExportRecord>, AnnotateError> {
    if corpus.entries.is_empty() {
        return Err(AnnotateError::NoDemonstrations);
    }
    let mut out = Vec::new();
    for i in sample_indices(corpus.entries.len(), fraction, seed)? {
        let demo = &corpus.entries[i];
        let prompt = match corpus.variant {
            CorpusVariant::Drag => templates.render_drag(&demo.query, &demo.documents, &Variation::default())?,
            CorpusVariant::SftBaseline => templates.render_rag(&demo.query, &demo.documents)?,
        };
        out.push(ExportRecord {
            prompt_text: prompt.text(),
            training_text: demo.training_text.clone(),
            query_id: demo.query.id.clone(),
            lang: demo.query.lang.clone(),
            teacher: demo.provenance.teacher.clone(),
            judge: demo.provenance.judge.clone(),
            variant: corpus.variant,
        });
    }
    out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(out)
}

/// Writes the corpus as JSON lines; returns the number of records written.
pub fn export_corpus<S: Clone>(
    corpus: &SftCorpus<S>,
    templates: &TemplateSet,
    fraction: f64,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<usize, AnnotateError> {
    let records = export_records(corpus, templates, fraction, seed)?;
    let mut body = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut body, r).expect("export record serialization is infallible");
        body.push(b'\n');
    }
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&body)?;
    Ok(records.len())
}

/// Counts at each stage of the annotation pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub candidates: usize,
    pub generation_failures: usize,
    pub structurally_valid: usize,
    pub stage1_kept: usize,
    pub judge_approved: usize,
    pub judge_rejected: usize,
    pub judge_protocol_violations: usize,
    pub judge_failures: usize,
}

#[derive(Debug, Clone)]
pub struct AnnotationOutcome<S> {
    pub demonstrations: Vec<Demonstration<S>>,
    pub stats: AnnotationStats,
}

/// Shared inputs of the annotation pipeline.
pub struct Annotator<'a> {
    pub teacher: &'a dyn Backend,
    pub judge: &'a dyn Backend,
    pub cache: &'a ResponseCache,
    pub templates: &'a TemplateSet,
    pub params: GenerationParams,
    pub workers: usize,
}

enum Outcome<S> {
    GenerationFailed,
    Dropped { valid: bool },
    Judged(Result<bool, AnnotateError>, Box<Candidate<S>>),
}

impl Annotator<'_> {
    /// Generates, filters and judges one candidate per `(query, documents)` pair.
    /// Per-item failures are counted and logged; the batch continues.
    pub fn run<S: Clone + Send + Sync>(
        &self,
        items: &[(QueryRecord, Vec<DocumentRecord<S>>)],
    ) -> AnnotationOutcome<S> {
        let outcomes = parallel_map(items, self.workers, |(query, docs)| {
            let candidate = match generate_candidate(self.teacher, self.cache, self.templates, query, docs, &self.params) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("teacher failed on {}: {e}", query.id);
                    return Outcome::GenerationFailed;
                }
            };
            if !filter_stage1(&candidate) {
                return Outcome::Dropped {
                    valid: candidate.report.if_pass,
                };
            }
            let verdict = filter_stage2(&candidate, self.judge, self.cache, self.templates, &self.params);
            Outcome::Judged(verdict, Box::new(candidate))
        });

        let mut stats = AnnotationStats {
            candidates: items.len(),
            ..AnnotationStats::default()
        };
        let mut demonstrations = Vec::new();
        for outcome in outcomes {
            match outcome {
                Outcome::GenerationFailed => stats.generation_failures += 1,
                Outcome::Dropped { valid } => stats.structurally_valid += usize::from(valid),
                Outcome::Judged(verdict, candidate) => {
                    stats.structurally_valid += 1;
                    stats.stage1_kept += 1;
                    match verdict {
                        Ok(true) => {
                            stats.judge_approved += 1;
                            demonstrations.push(Demonstration::from_candidate(&candidate, self.judge.model_name()));
                        }
                        Ok(false) => stats.judge_rejected += 1,
                        Err(e @ AnnotateError::JudgeProtocolViolation { .. }) => {
                            log::warn!("{e}");
                            stats.judge_protocol_violations += 1;
                        }
                        Err(e) => {
                            log::warn!("judge failed on {}: {e}", candidate.query.id);
                            stats.judge_failures += 1;
                        }
                    }
                }
            }
        }
        demonstrations.sort_by(|a, b| a.query.id.cmp(&b.query.id));
        AnnotationOutcome { demonstrations, stats }
    }
}

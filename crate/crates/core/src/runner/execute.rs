use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use super::record::read_results_lenient;
use super::{
    default_cache_path, sidecar, write_atomic, Perturbation, PerturbationRecord, ResultRecord, RetrievedDoc,
    RunConfig, RunError, RunLogEntry, RunMode, RunStatus, TraceSummary,
};
use crate::annotate::lenient_parse;
use crate::dataset::{load_dataset, QueryRecord};
use crate::gateway::{
    cache_key, cached_embed, cached_generate, Backend, BackendSpec, ChatMessage, RequestContext, ResponseCache,
};
use crate::index::{read_documents, CorpusIndex};
use crate::metrics::{aggregate, LanguageIdentifier, MetricsTable, ScoredRecord};
use crate::parser::{extract_final_answer, has_answer_header};
use crate::perturb::{inject_noise, query_seed, shuffle_docs};
use crate::prompts::{TemplateSet, Variation};
use crate::sync::parallel_map;
use crate::{Document, Index};

/// Loaded resources shared by every query of a run.
pub struct RunContext<'a> {
    pub generator: &'a dyn Backend,
    pub embedder: &'a dyn Backend,
    pub cache: &'a ResponseCache,
    pub templates: &'a TemplateSet,
    pub index: Option<&'a Index>,
    /// Distractor pool; the index documents are used when absent.
    pub pool: Option<&'a [Document]>,
    pub lid: &'a LanguageIdentifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    /// Queries processed by this invocation.
    pub executed: usize,
    /// Queries already present in the output with status ok.
    pub skipped: usize,
    /// Queries left for a later invocation because of `limit`.
    pub remaining: usize,
    pub errors: usize,
    /// Executed queries whose every request was served from the cache.
    pub cache_hits: usize,
    pub records: usize,
    pub metrics: Option<MetricsTable>,
}

/// Loads every resource named by `config` and runs it.
pub fn run(config: &RunConfig) -> Result<RunSummary, RunError> {
    config.validate()?;
    let queries = load_dataset(&config.dataset)?;
    let generator = BackendSpec::from_toml_file(&config.backend)?.connect()?;
    let embedder = match &config.embedder {
        Some(path) => Some(BackendSpec::from_toml_file(path)?.connect()?),
        None => None,
    };
    let index = match (&config.index, config.mode.uses_retrieval()) {
        (Some(path), true) => Some(CorpusIndex::<f32>::load(path)?),
        _ => None,
    };
    let pool = match &config.perturbation {
        Perturbation::Noise { pool: Some(path), .. } => Some(read_documents::<f32>(path)?),
        _ => None,
    };
    let templates = match &config.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let cache_path = config.cache.clone().unwrap_or_else(|| default_cache_path(&config.output));
    let cache = ResponseCache::open(cache_path)?;
    let lid = LanguageIdentifier::from_spec(&config.lid)
        .ok_or_else(|| RunError::ConfigInvalid(format!("unknown language identifier {:?}", config.lid)))?;
    let ctx = RunContext {
        generator: generator.as_ref(),
        embedder: embedder.as_deref().unwrap_or(generator.as_ref()),
        cache: &cache,
        templates: &templates,
        index: index.as_ref(),
        pool: pool.as_deref(),
        lid: &lid,
    };
    execute(config, &queries, &ctx)
}

/// [`run`] for the one-step-at-a-time protocol.
pub fn run_decomposed(config: &RunConfig) -> Result<RunSummary, RunError> {
    if config.mode != RunMode::DragDecomposed {
        return Err(RunError::ConfigInvalid(format!(
            "decomposed runs need mode drag_decomposed, got {}",
            config.mode
        )));
    }
    run(config)
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    generator_model: &'a str,
    embedder_model: Option<&'a str>,
    templates: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

const ABLATION_NOTE: &str = "ablated prompts renumber the remaining steps consecutively from 1";

/// Runs `queries`, resuming from any records already in `config.output`.
pub fn execute(config: &RunConfig, queries: &[QueryRecord], ctx: &RunContext<'_>) -> Result<RunSummary, RunError> {
    config.validate()?;
    if config.mode.uses_retrieval() && ctx.index.is_none() {
        return Err(RunError::ConfigInvalid(format!("mode {} requires an index", config.mode)));
    }
    let out = config.output.as_path();
    let wanted: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
    let mut kept: BTreeMap<String, ResultRecord> = BTreeMap::new();
    for r in read_results_lenient(out)? {
        if r.mode != config.mode {
            return Err(RunError::ConfigInvalid(format!(
                "{} holds {} results; this run is {}",
                out.display(),
                r.mode,
                config.mode
            )));
        }
        if r.status == RunStatus::Ok && wanted.contains(r.query_id.as_str()) {
            kept.insert(r.query_id.clone(), r);
        }
    }
    let skipped = kept.len();
    let mut pending: Vec<&QueryRecord> = queries.iter().filter(|q| !kept.contains_key(&q.id)).collect();
    let remaining = match config.limit {
        Some(limit) if limit < pending.len() => {
            let rest = pending.len() - limit;
            pending.truncate(limit);
            rest
        }
        _ => 0,
    };

    if let (Some(index), Some(first)) = (ctx.index, pending.first()) {
        let (vectors, _) = cached_embed(ctx.cache, ctx.embedder, std::slice::from_ref(&first.question))?;
        if vectors[0].len() != index.dim() {
            return Err(RunError::DimensionMismatch {
                expected: index.dim(),
                found: vectors[0].len(),
            });
        }
    }

    write_atomic(out, &render_results(kept.values()))?;
    write_manifest(config, ctx)?;
    let results_file = Mutex::new(OpenOptions::new().append(true).open(out)?);
    let runlog_file = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(sidecar(out, ".runlog.jsonl"))?,
    );

    let outcomes = parallel_map(&pending, config.concurrency, |query| {
        let started = Instant::now();
        let (record, cache_hit) = process_query(config, ctx, query);
        let entry = RunLogEntry {
            query_id: record.query_id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            cache_hit,
            status: record.status,
        };
        append_line(&results_file, &record.to_line());
        append_line(&runlog_file, &serde_json::to_string(&entry).expect("run log serialization is infallible"));
        (record, cache_hit)
    });

    let executed = outcomes.len();
    let errors = outcomes.iter().filter(|(r, _)| r.status == RunStatus::Error).count();
    let cache_hits = outcomes.iter().filter(|(_, hit)| *hit).count();
    for (record, _) in outcomes {
        kept.insert(record.query_id.clone(), record);
    }
    write_atomic(out, &render_results(kept.values()))?;

    let scored: Vec<ScoredRecord> = kept.values().map(ResultRecord::scored).collect();
    Ok(RunSummary {
        executed,
        skipped,
        remaining,
        errors,
        cache_hits,
        records: kept.len(),
        metrics: aggregate(&scored).ok(),
    })
}

fn append_line(file: &Mutex<File>, line: &str) {
    let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
    if let Err(e) = f.write_all(format!("{line}\n").as_bytes()) {
        log::warn!("could not append progress line: {e}");
    }
}

fn render_results<'a>(records: impl Iterator<Item = &'a ResultRecord>) -> Vec<u8> {
    let mut body = Vec::new();
    for r in records {
        body.extend_from_slice(r.to_line().as_bytes());
        body.push(b'\n');
    }
    body
}

fn write_manifest(config: &RunConfig, ctx: &RunContext<'_>) -> Result<(), RunError> {
    let manifest = Manifest {
        config,
        generator_model: ctx.generator.model_name(),
        embedder_model: config.mode.uses_retrieval().then(|| ctx.embedder.embedding_model_name()),
        templates: ctx.templates.checksums(),
        note: (!config.ablated_steps.is_empty()).then_some(ABLATION_NOTE),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
    text.push('\n');
    write_atomic(&sidecar(&config.output, ".manifest.json"), text.as_bytes())?;
    Ok(())
}

fn blank_record(config: &RunConfig, query: &QueryRecord) -> ResultRecord {
    ResultRecord {
        query_id: query.id.clone(),
        lang: query.lang.clone(),
        mode: config.mode,
        ablated_steps: config.ablated_steps.iter().copied().collect(),
        argumentation_language: config.argumentation_language.clone(),
        status: RunStatus::Ok,
        error: None,
        retrieved: Vec::new(),
        perturbation: None,
        prompt_fingerprint: None,
        raw_output: String::new(),
        step_outputs: Vec::new(),
        trace: None,
        final_answer: String::new(),
        gold_answers: query.gold_answers.clone(),
        controller: query.controller.clone(),
        targets: query.scoring_targets(),
        flexible_match: false,
        strict_match: false,
        language_ok: None,
        if_pass: None,
    }
}

/// Runs one query; failures become a record with status `error`.
fn process_query(config: &RunConfig, ctx: &RunContext<'_>, query: &QueryRecord) -> (ResultRecord, bool) {
    let mut record = blank_record(config, query);
    match attempt(config, ctx, query, &mut record) {
        Ok(hit) => (record, hit),
        Err(e) => {
            log::warn!("query {} failed: {e}", query.id);
            let mut failed = blank_record(config, query);
            failed.status = RunStatus::Error;
            failed.error = Some(e.to_string());
            failed.retrieved = record.retrieved;
            failed.perturbation = record.perturbation;
            (failed, false)
        }
    }
}

fn retrieve_documents(
    config: &RunConfig,
    ctx: &RunContext<'_>,
    query: &QueryRecord,
    record: &mut ResultRecord,
) -> Result<(Vec<Document>, bool), RunError> {
    let index = ctx
        .index
        .ok_or_else(|| RunError::ConfigInvalid(format!("mode {} requires an index", config.mode)))?;
    let (vectors, missed) = cached_embed(ctx.cache, ctx.embedder, std::slice::from_ref(&query.question))?;
    let hits = index.retrieve(
        &vectors[0],
        config.top_k_candidates,
        config.top_k_final,
        config.retrieval_langs.as_ref(),
    )?;
    record.retrieved = hits
        .iter()
        .map(|h| RetrievedDoc {
            doc_id: h.document.doc_id.clone(),
            score: h.score,
        })
        .collect();
    let docs: Vec<Document> = hits.into_iter().map(|h| h.document.clone()).collect();

    let seed = query_seed(config.seed, &query.id);
    let (presented, insertions) = match &config.perturbation {
        Perturbation::None => (docs, Vec::new()),
        Perturbation::Shuffle => (shuffle_docs(&docs, seed), Vec::new()),
        Perturbation::Noise { count, .. } => {
            let retrieved: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
            let source = ctx.pool.unwrap_or(index.documents());
            let pool: Vec<Document> = source
                .iter()
                .filter(|d| !retrieved.contains(d.doc_id.as_str()))
                .map(|d| Document::new(d.doc_id.clone(), d.title.clone(), d.text.clone(), d.lang.clone(), Vec::new()))
                .collect();
            let noisy = inject_noise(&docs, &pool, *count, seed)?;
            (noisy.documents, noisy.insertions)
        }
    };
    record.perturbation = Some(PerturbationRecord {
        kind: config.perturbation.label().to_string(),
        presented: presented.iter().map(|d| d.doc_id.clone()).collect(),
        insertions,
    });
    Ok((presented, missed == 0))
}

/// Returns whether every request was a cache hit.
fn attempt(
    config: &RunConfig,
    ctx: &RunContext<'_>,
    query: &QueryRecord,
    record: &mut ResultRecord,
) -> Result<bool, RunError> {
    let (docs, mut all_hit) = if config.mode.uses_retrieval() {
        retrieve_documents(config, ctx, query, record)?
    } else {
        (Vec::new(), true)
    };

    let variation = Variation {
        ablated_steps: config.ablated_steps.clone(),
        argumentation_language: config.argumentation_language.clone(),
        decomposed: config.mode == RunMode::DragDecomposed,
    };
    let base_ctx = RequestContext::for_query(&query.id);
    let generate = |messages: &[ChatMessage], ctx_req: &RequestContext| {
        let key = cache_key(ctx.generator.model_name(), messages, &config.params);
        cached_generate(ctx.cache, ctx.generator, messages, &config.params, ctx_req).map(|(text, hit)| (text, hit, key))
    };

    let answer_source: String;
    match config.mode {
        RunMode::Baseline | RunMode::Rag | RunMode::Drag => {
            let bundle = match config.mode {
                RunMode::Baseline => ctx.templates.render_baseline(query)?,
                RunMode::Rag => ctx.templates.render_rag(query, &docs)?,
                _ => ctx.templates.render_drag(query, &docs, &variation)?,
            };
            let (raw, hit, key) = generate(&bundle.messages, &base_ctx)?;
            all_hit &= hit;
            record.prompt_fingerprint = Some(key);
            record.raw_output = raw.clone();
            answer_source = raw;
        }
        RunMode::DragDecomposed => {
            let mut outputs: Vec<String> = Vec::with_capacity(4);
            for step in 1..=4u8 {
                let bundle = ctx.templates.render_drag_step(query, &docs, step, &outputs, &variation)?;
                let (out, hit, key) = generate(&bundle.messages, &base_ctx.clone().with_step(step))?;
                all_hit &= hit;
                record.prompt_fingerprint = Some(key);
                outputs.push(out);
            }
            record.raw_output = outputs.join("\n\n");
            answer_source = outputs[3].clone();
            record.step_outputs = outputs;
        }
    }

    let if_pass = if config.mode.is_dialectic() {
        let (trace, report) = lenient_parse(&record.raw_output, Some(docs.len()));
        record.trace = Some(TraceSummary::new(&report, trace.verdicts));
        report.if_pass
    } else {
        has_answer_header(&record.raw_output)
    };
    record.final_answer = extract_final_answer(&answer_source).unwrap_or_default();

    let scored = ScoredRecord::score(query, &record.final_answer, Some(if_pass), Some(ctx.lid))?;
    record.flexible_match = scored.flexible_match;
    record.strict_match = scored.strict_match;
    record.language_ok = scored.language_ok;
    record.if_pass = scored.if_pass;
    Ok(all_hit)
}

/// Builds an index from a line-delimited corpus. Documents without an
/// embedding are embedded with `embedder` in batches.
pub fn build_index(
    corpus: impl AsRef<Path>,
    dim: Option<usize>,
    embedder: Option<(&dyn Backend, &ResponseCache)>,
) -> Result<Index, RunError> {
    const BATCH: usize = 64;
    let mut docs = read_documents::<f32>(corpus)?;
    let missing: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].embedding.is_empty()).collect();
    if !missing.is_empty() {
        let (backend, cache) = embedder.ok_or_else(|| {
            RunError::ConfigInvalid(format!(
                "document {:?} has no embedding and no embedder is configured",
                docs[missing[0]].doc_id
            ))
        })?;
        for chunk in missing.chunks(BATCH) {
            let texts: Vec<String> = chunk.iter().map(|&i| docs[i].text.clone()).collect();
            let (vectors, _) = cached_embed(cache, backend, &texts)?;
            for (&i, v) in chunk.iter().zip(vectors) {
                docs[i].embedding = v;
            }
        }
    }
    let dim = match dim {
        Some(d) => d,
        None => docs
            .first()
            .map(|d| d.embedding.len())
            .ok_or_else(|| RunError::ConfigInvalid("corpus is empty".into()))?,
    };
    Ok(CorpusIndex::build(docs, dim)?)
}

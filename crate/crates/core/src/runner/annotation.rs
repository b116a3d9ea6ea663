use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{default_cache_path, sidecar, write_atomic, RunError};
use crate::annotate::{export_corpus, AnnotationStats, Annotator, CorpusVariant, SftCorpus};
use crate::dataset::{load_dataset, QueryRecord};
use crate::gateway::{cached_embed, Backend, BackendSpec, GenerationParams, ResponseCache};
use crate::index::CorpusIndex;
use crate::prompts::TemplateSet;
use crate::sync::parallel_map;
use crate::{Document, Index};

/// Everything that determines an annotation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateConfig {
    pub dataset: PathBuf,
    pub index: PathBuf,
    pub teacher: PathBuf,
    pub judge: PathBuf,
    /// Backend used for query embeddings; the teacher when unset.
    pub embedder: Option<PathBuf>,
    /// Share of approved demonstrations exported, in (0, 1].
    pub fraction: f64,
    pub seed: u64,
    pub output: PathBuf,
    pub variant: CorpusVariant,
    pub top_k_final: usize,
    pub top_k_candidates: usize,
    pub concurrency: usize,
    pub cache: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub params: GenerationParams,
}

impl AnnotateConfig {
    pub fn new(
        dataset: impl Into<PathBuf>,
        index: impl Into<PathBuf>,
        teacher: impl Into<PathBuf>,
        judge: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            index: index.into(),
            teacher: teacher.into(),
            judge: judge.into(),
            embedder: None,
            fraction: 1.0,
            seed: 0,
            output: output.into(),
            variant: CorpusVariant::Drag,
            top_k_final: 5,
            top_k_candidates: 10,
            concurrency: 4,
            cache: None,
            template_dir: None,
            params: GenerationParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let invalid = |msg: String| Err(RunError::ConfigInvalid(msg));
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return invalid(format!("fraction {} is not in (0, 1]", self.fraction));
        }
        if self.top_k_final == 0 || self.top_k_candidates < self.top_k_final {
            return invalid(format!(
                "need 1 <= top-k ({}) <= candidates ({})",
                self.top_k_final, self.top_k_candidates
            ));
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        Ok(())
    }
}

/// Loaded resources of an annotation job.
pub struct AnnotateResources<'a> {
    pub teacher: &'a dyn Backend,
    pub judge: &'a dyn Backend,
    pub embedder: &'a dyn Backend,
    pub cache: &'a ResponseCache,
    pub templates: &'a TemplateSet,
    pub index: &'a Index,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub stats: AnnotationStats,
    /// Demonstrations that passed both filters.
    pub approved: usize,
    /// Records written after subsampling.
    pub exported: usize,
    pub languages: BTreeMap<String, usize>,
}

/// Loads every resource named by `config` and annotates the dataset.
pub fn run_annotation(config: &AnnotateConfig) -> Result<AnnotateSummary, RunError> {
    config.validate()?;
    let queries = load_dataset(&config.dataset)?;
    let teacher = BackendSpec::from_toml_file(&config.teacher)?.connect()?;
    let judge = BackendSpec::from_toml_file(&config.judge)?.connect()?;
    let embedder = match &config.embedder {
        Some(path) => Some(BackendSpec::from_toml_file(path)?.connect()?),
        None => None,
    };
    let index = CorpusIndex::<f32>::load(&config.index)?;
    let templates = match &config.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let cache = ResponseCache::open(config.cache.clone().unwrap_or_else(|| default_cache_path(&config.output)))?;
    let resources = AnnotateResources {
        teacher: teacher.as_ref(),
        judge: judge.as_ref(),
        embedder: embedder.as_deref().unwrap_or(teacher.as_ref()),
        cache: &cache,
        templates: &templates,
        index: &index,
    };
    run_annotation_with(config, &queries, &resources)
}

/// Retrieves documents, generates and filters candidates, and exports the
/// approved demonstrations to `config.output` with a `.stats.json` sidecar.
pub fn run_annotation_with(
    config: &AnnotateConfig,
    queries: &[QueryRecord],
    res: &AnnotateResources<'_>,
) -> Result<AnnotateSummary, RunError> {
    config.validate()?;
    let retrieved = parallel_map(queries, config.concurrency, |query| -> Result<_, RunError> {
        let (vectors, _) = cached_embed(res.cache, res.embedder, std::slice::from_ref(&query.question))?;
        if vectors[0].len() != res.index.dim() {
            return Err(RunError::DimensionMismatch {
                expected: res.index.dim(),
                found: vectors[0].len(),
            });
        }
        let docs: Vec<Document> = res
            .index
            .retrieve(&vectors[0], config.top_k_candidates, config.top_k_final, None)?
            .into_iter()
            .map(|h| h.document.clone())
            .collect();
        Ok((query.clone(), docs))
    });
    let items = retrieved.into_iter().collect::<Result<Vec<_>, _>>()?;

    let annotator = Annotator {
        teacher: res.teacher,
        judge: res.judge,
        cache: res.cache,
        templates: res.templates,
        params: config.params.clone(),
        workers: config.concurrency,
    };
    let outcome = annotator.run(&items);
    let corpus = SftCorpus::new(outcome.demonstrations, config.variant);
    let exported = export_corpus(&corpus, res.templates, config.fraction, config.seed, &config.output)?;
    let summary = AnnotateSummary {
        stats: outcome.stats,
        approved: corpus.entries.len(),
        exported,
        languages: corpus.language_histogram(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serialization is infallible");
    text.push('\n');
    write_atomic(&sidecar(&config.output, ".stats.json"), text.as_bytes())?;
    Ok(summary)
}

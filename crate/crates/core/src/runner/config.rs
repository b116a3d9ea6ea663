use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::gateway::GenerationParams;
use crate::lang;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Question only, no retrieval.
    Baseline,
    /// Retrieved documents with the plain answer instruction.
    Rag,
    /// Single prompt with all dialectic steps.
    Drag,
    /// One request per dialectic step.
    DragDecomposed,
}

impl RunMode {
    pub fn uses_retrieval(self) -> bool {
        self != RunMode::Baseline
    }

    pub fn is_dialectic(self) -> bool {
        matches!(self, RunMode::Drag | RunMode::DragDecomposed)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Baseline => "baseline",
            RunMode::Rag => "rag",
            RunMode::Drag => "drag",
            RunMode::DragDecomposed => "drag_decomposed",
        })
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RunMode::Baseline),
            "rag" => Ok(RunMode::Rag),
            "drag" => Ok(RunMode::Drag),
            "drag-decomposed" | "drag_decomposed" => Ok(RunMode::DragDecomposed),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Perturbation {
    None,
    Shuffle,
    /// Inserts `count` distractors drawn from `pool`, or from the index when no
    /// pool is given. Documents already retrieved for the query are excluded.
    Noise { count: usize, pool: Option<PathBuf> },
}

impl Perturbation {
    /// Parses `none`, `shuffle` or `noise` (two distractors).
    pub fn parse(kind: &str, pool: Option<PathBuf>) -> Result<Self, String> {
        match kind {
            "none" => Ok(Perturbation::None),
            "shuffle" => Ok(Perturbation::Shuffle),
            "noise" => Ok(Perturbation::Noise { count: 2, pool }),
            other => Err(format!("unknown perturbation {other:?}")),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Perturbation::None => "none",
            Perturbation::Shuffle => "shuffle",
            Perturbation::Noise { .. } => "noise",
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub dataset: PathBuf,
    pub index: Option<PathBuf>,
    pub backend: PathBuf,
    /// Backend used for query embeddings; the generation backend when unset.
    pub embedder: Option<PathBuf>,
    pub top_k_final: usize,
    pub top_k_candidates: usize,
    pub perturbation: Perturbation,
    pub ablated_steps: BTreeSet<u8>,
    pub argumentation_language: String,
    pub seed: u64,
    pub concurrency: usize,
    pub output: PathBuf,
    /// `builtin` or `cmd:<command>`.
    pub lid: String,
    pub cache: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    /// Restricts retrieval to documents in these languages.
    pub retrieval_langs: Option<BTreeSet<String>>,
    pub params: GenerationParams,
    /// Stops after this many pending queries; the rest are left for a resumed run.
    #[serde(skip)]
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn new(mode: RunMode, dataset: impl Into<PathBuf>, backend: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            dataset: dataset.into(),
            index: None,
            backend: backend.into(),
            embedder: None,
            top_k_final: 5,
            top_k_candidates: 10,
            perturbation: Perturbation::None,
            ablated_steps: BTreeSet::new(),
            argumentation_language: "en".to_string(),
            seed: 0,
            concurrency: 4,
            output: output.into(),
            lid: "builtin".to_string(),
            cache: None,
            template_dir: None,
            retrieval_langs: None,
            params: GenerationParams::default(),
            limit: None,
        }
    }

    /// Checks option combinations before any backend call.
    pub fn validate(&self) -> Result<(), RunError> {
        let invalid = |msg: String| Err(RunError::ConfigInvalid(msg));
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if self.mode.uses_retrieval() {
            if self.index.is_none() {
                return invalid(format!("mode {} requires an index", self.mode));
            }
            if self.top_k_final == 0 {
                return invalid("top-k must be at least 1".into());
            }
            if self.top_k_candidates < self.top_k_final {
                return invalid(format!(
                    "candidates ({}) must be at least top-k ({})",
                    self.top_k_candidates, self.top_k_final
                ));
            }
        } else if self.perturbation != Perturbation::None {
            return invalid("perturbations need retrieved documents; baseline mode has none".into());
        }
        if !self.mode.is_dialectic() {
            if !self.ablated_steps.is_empty() {
                return invalid(format!("step ablation is not available in mode {}", self.mode));
            }
            if self.argumentation_language != "en" {
                return invalid(format!("argumentation language is not available in mode {}", self.mode));
            }
        }
        if self.mode == RunMode::DragDecomposed && !self.ablated_steps.is_empty() {
            return invalid("step ablation applies to the single-prompt drag mode".into());
        }
        if let Some(bad) = self.ablated_steps.iter().find(|s| !(1..=4).contains(*s)) {
            return invalid(format!("ablated step {bad} is not in 1..=4"));
        }
        if self.ablated_steps.len() == 4 {
            return invalid("cannot ablate every step".into());
        }
        if lang::display_name(&self.argumentation_language).is_none() {
            return invalid(format!("unknown argumentation language {:?}", self.argumentation_language));
        }
        if let Perturbation::Noise { count: 0, .. } = self.perturbation {
            return invalid("noise perturbation needs at least one distractor".into());
        }
        if crate::metrics::LanguageIdentifier::from_spec(&self.lid).is_none() {
            return invalid(format!("unknown language identifier {:?}", self.lid));
        }
        Ok(())
    }
}

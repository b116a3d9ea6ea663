//! Prompt rendering from `{placeholder}` text templates.
//!
//! Templates are plain text files: `baseline.txt`, `rag.txt`, `drag.txt`,
//! `drag_step_1.txt` .. `drag_step_4.txt` and `judge.txt`. A built-in copy is
//! compiled in; [`TemplateSet::load_dir`] reads a replacement set at run time.
//!
//! A rendered template is split at its first blank line: the leading block
//! becomes the system message, the remainder the user message. Templates
//! without a blank line produce a single user message.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::QueryRecord;
use crate::gateway::{ChatMessage, Role};
use crate::index::DocumentRecord;
use crate::lang;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("at least one document is required")]
    NoDocuments,
    #[error("every reasoning step is ablated")]
    AllStepsAblated,
    #[error("step {0} is not in 1..=4")]
    InvalidStep(u8),
    #[error("step {step} needs {expected} prior outputs, got {found}")]
    MissingPriorOutput { step: u8, expected: usize, found: usize },
    #[error("no display name for language {0:?}")]
    UnknownLanguage(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("judge input {0} is empty")]
    EmptyJudgeInput(&'static str),
    #[error("template {0} not found")]
    MissingTemplate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// File names making up a template set, in a fixed order.
pub const TEMPLATE_FILES: [&str; 8] = [
    "baseline.txt",
    "rag.txt",
    "drag.txt",
    "drag_step_1.txt",
    "drag_step_2.txt",
    "drag_step_3.txt",
    "drag_step_4.txt",
    "judge.txt",
];

/// The prompt templates used by every renderer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub baseline: String,
    pub rag: String,
    pub drag: String,
    pub steps: [String; 4],
    pub judge: String,
}

/// Drops exactly one trailing newline, the file terminator.
fn strip_terminator(text: &str) -> String {
    text.strip_suffix('\n').unwrap_or(text).to_string()
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            baseline: strip_terminator(include_str!("../templates/baseline.txt")),
            rag: strip_terminator(include_str!("../templates/rag.txt")),
            drag: strip_terminator(include_str!("../templates/drag.txt")),
            steps: [
                strip_terminator(include_str!("../templates/drag_step_1.txt")),
                strip_terminator(include_str!("../templates/drag_step_2.txt")),
                strip_terminator(include_str!("../templates/drag_step_3.txt")),
                strip_terminator(include_str!("../templates/drag_step_4.txt")),
            ],
            judge: strip_terminator(include_str!("../templates/judge.txt")),
        }
    }

    /// Reads all eight template files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String, PromptError> {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(PromptError::MissingTemplate(path.display().to_string()));
            }
            Ok(strip_terminator(&fs::read_to_string(path)?))
        };
        Ok(Self {
            baseline: read("baseline.txt")?,
            rag: read("rag.txt")?,
            drag: read("drag.txt")?,
            steps: [
                read("drag_step_1.txt")?,
                read("drag_step_2.txt")?,
                read("drag_step_3.txt")?,
                read("drag_step_4.txt")?,
            ],
            judge: read("judge.txt")?,
        })
    }

    fn by_file(&self) -> [(&'static str, &str); 8] {
        [
            (TEMPLATE_FILES[0], &self.baseline),
            (TEMPLATE_FILES[1], &self.rag),
            (TEMPLATE_FILES[2], &self.drag),
            (TEMPLATE_FILES[3], &self.steps[0]),
            (TEMPLATE_FILES[4], &self.steps[1]),
            (TEMPLATE_FILES[5], &self.steps[2]),
            (TEMPLATE_FILES[6], &self.steps[3]),
            (TEMPLATE_FILES[7], &self.judge),
        ]
    }

    /// SHA-256 of each template as loaded, keyed by file name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.by_file()
            .into_iter()
            .map(|(name, text)| (name.to_string(), hex::encode(Sha256::digest(text.as_bytes()))))
            .collect()
    }

    pub fn render_baseline(&self, query: &QueryRecord) -> Result<PromptBundle, PromptError> {
        check_question(query)?;
        Ok(PromptBundle {
            messages: split_messages(&self.baseline, &[("question", &query.question)]),
            mode: PromptMode::Baseline,
            variation: Variation::default(),
        })
    }

    pub fn render_rag<S>(&self, query: &QueryRecord, docs: &[DocumentRecord<S>]) -> Result<PromptBundle, PromptError> {
        check_question(query)?;
        let documents = render_documents(docs)?;
        Ok(PromptBundle {
            messages: split_messages(&self.rag, &[("documents", &documents), ("question", &query.question)]),
            mode: PromptMode::Rag,
            variation: Variation::default(),
        })
    }

    /// Single-prompt dialectic template with the non-ablated steps renumbered from 1.
    pub fn render_drag<S>(
        &self,
        query: &QueryRecord,
        docs: &[DocumentRecord<S>],
        variation: &Variation,
    ) -> Result<PromptBundle, PromptError> {
        check_question(query)?;
        let documents = render_documents(docs)?;
        if let Some(&bad) = variation.ablated_steps.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(PromptError::InvalidStep(bad));
        }
        let active: Vec<u8> = (1..=4).filter(|s| !variation.ablated_steps.contains(s)).collect();
        if active.is_empty() {
            return Err(PromptError::AllStepsAblated);
        }
        let language = shared_language(&variation.argumentation_language)?;
        let blocks: Vec<String> = active
            .iter()
            .enumerate()
            .map(|(i, &step)| {
                let number = i + 1;
                let previous = if i == 0 { number } else { number - 1 };
                self.render_step_block(step, number, previous, language)
            })
            .collect();
        let instructions = blocks.join("\n\n");
        Ok(PromptBundle {
            messages: split_messages(
                &self.drag,
                &[
                    ("documents", &documents),
                    ("instructions", &instructions),
                    ("question", &query.question),
                ],
            ),
            mode: PromptMode::Drag,
            variation: variation.clone(),
        })
    }

    /// One step of the decomposed protocol. Prior step outputs precede the
    /// instruction as assistant messages; the step keeps its original number.
    pub fn render_drag_step<S>(
        &self,
        query: &QueryRecord,
        docs: &[DocumentRecord<S>],
        step: u8,
        prior_outputs: &[String],
        variation: &Variation,
    ) -> Result<PromptBundle, PromptError> {
        if !(1..=4).contains(&step) {
            return Err(PromptError::InvalidStep(step));
        }
        let expected = usize::from(step) - 1;
        if prior_outputs.len() != expected {
            return Err(PromptError::MissingPriorOutput {
                step,
                expected,
                found: prior_outputs.len(),
            });
        }
        check_question(query)?;
        let documents = render_documents(docs)?;
        let language = shared_language(&variation.argumentation_language)?;
        let number = usize::from(step);
        let block = self.render_step_block(step, number, number.saturating_sub(1).max(1), language);
        let rendered = split_messages(
            &self.drag,
            &[("documents", &documents), ("instructions", &block), ("question", &query.question)],
        );
        let (system, user): (Vec<_>, Vec<_>) = rendered.into_iter().partition(|m| m.role == Role::System);
        let mut messages = system;
        messages.extend(prior_outputs.iter().map(ChatMessage::assistant));
        messages.extend(user);
        Ok(PromptBundle {
            messages,
            mode: PromptMode::DragStep(step),
            variation: Variation {
                decomposed: true,
                ..variation.clone()
            },
        })
    }

    /// Judge prompt; substituted text is inserted literally.
    pub fn render_judge(&self, response: &str, target: &str, instructions: &str) -> Result<PromptBundle, PromptError> {
        for (name, value) in [("response", response), ("target", target), ("instructions", instructions)] {
            if value.trim().is_empty() {
                return Err(PromptError::EmptyJudgeInput(name));
            }
        }
        Ok(PromptBundle {
            messages: split_messages(
                &self.judge,
                &[("response", response), ("target", target), ("instructions", instructions)],
            ),
            mode: PromptMode::Judge,
            variation: Variation::default(),
        })
    }

    fn render_step_block(&self, step: u8, number: usize, previous: usize, language: &str) -> String {
        let number = number.to_string();
        let previous = previous.to_string();
        substitute(
            &self.steps[usize::from(step) - 1],
            &[
                ("number", &number),
                ("previous_number", &previous),
                ("shared_language", language),
            ],
        )
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

fn check_question(query: &QueryRecord) -> Result<(), PromptError> {
    if query.question.trim().is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    Ok(())
}

fn shared_language(code: &str) -> Result<&'static str, PromptError> {
    lang::display_name(code).ok_or_else(|| PromptError::UnknownLanguage(code.to_string()))
}

/// `[i] text` lines, numbered from 1 in the given order.
pub fn render_documents<S>(docs: &[DocumentRecord<S>]) -> Result<String, PromptError> {
    if docs.is_empty() {
        return Err(PromptError::NoDocuments);
    }
    Ok(docs
        .iter()
        .enumerate()
        .map(|(i, d)| format!("[{}] {}", i + 1, d.text))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Replaces `{name}` slots in one left-to-right pass. Inserted values are never
/// rescanned, and unknown `{...}` spans are kept literally.
pub fn substitute(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[1..close];
            slots
                .iter()
                .find(|(slot, _)| *slot == name)
                .map(|(_, value)| (close, *value))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Splits the template at its first blank line before substituting, so user
/// content cannot move the system/user boundary.
fn split_messages(template: &str, slots: &[(&str, &str)]) -> Vec<ChatMessage> {
    match template.split_once("\n\n") {
        Some((system, user)) => vec![
            ChatMessage::system(substitute(system, slots)),
            ChatMessage::user(substitute(user, slots)),
        ],
        None => vec![ChatMessage::user(substitute(template, slots))],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Baseline,
    Rag,
    Drag,
    DragStep(u8),
    Judge,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptMode::Baseline => f.write_str("baseline"),
            PromptMode::Rag => f.write_str("rag"),
            PromptMode::Drag => f.write_str("drag"),
            PromptMode::DragStep(k) => write!(f, "drag_step({k})"),
            PromptMode::Judge => f.write_str("judge"),
        }
    }
}

/// Ablation knobs for the dialectic prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variation {
    pub ablated_steps: BTreeSet<u8>,
    pub argumentation_language: String,
    pub decomposed: bool,
}

impl Default for Variation {
    fn default() -> Self {
        Self {
            ablated_steps: BTreeSet::new(),
            argumentation_language: "en".to_string(),
            decomposed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub mode: PromptMode,
    pub variation: Variation,
}

impl PromptBundle {
    /// Message contents joined by blank lines.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

//! Parsing of four-stage dialectic outputs.
//!
//! A section starts at a line whose first non-blank token is one of the
//! headers `#Extraction`, `#Explanation` (or the `#Explaination` spelling used
//! in the prompt), `#Dialectic Argumentation` or `#Answer`. Headers are
//! case-sensitive and may carry a trailing colon and markdown emphasis
//! (`**#Answer:**`). Text before the first header is ignored.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("output is empty")]
    EmptyOutput,
    #[error("no section headers found")]
    NoSectionsFound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Extraction,
    Explanation,
    Argumentation,
    Answer,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::Extraction,
        Section::Explanation,
        Section::Argumentation,
        Section::Answer,
    ];

    /// 1-based step number.
    pub fn step(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_step(step: u8) -> Option<Section> {
        Section::ALL.get(usize::from(step).checked_sub(1)?).copied()
    }

    /// Header as written in prompts.
    pub fn header(self) -> &'static str {
        match self {
            Section::Extraction => "#Extraction:",
            Section::Explanation => "#Explaination:",
            Section::Argumentation => "#Dialectic Argumentation:",
            Section::Answer => "#Answer:",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Extraction => "extraction",
            Section::Explanation => "explanation",
            Section::Argumentation => "argumentation",
            Section::Answer => "answer",
        })
    }
}

const HEADER_NAMES: &[(&str, Section)] = &[
    ("#Extraction", Section::Extraction),
    ("#Explanation", Section::Explanation),
    ("#Explaination", Section::Explanation),
    ("#Dialectic Argumentation", Section::Argumentation),
    ("#Answer", Section::Answer),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Relevant,
    Irrelevant,
    PartiallyRelevant,
    Unstated,
}

impl Relevance {
    fn priority(self) -> u8 {
        match self {
            Relevance::Unstated => 0,
            Relevance::Relevant => 1,
            Relevance::PartiallyRelevant => 2,
            Relevance::Irrelevant => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocVerdict {
    pub doc_index: u32,
    pub relevance: Relevance,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialecticTrace {
    pub extraction: String,
    pub explanation: String,
    pub argumentation: String,
    pub answer: String,
    pub verdicts: Vec<DocVerdict>,
    /// Every section occurrence in order of appearance.
    pub segments: Vec<(Section, String)>,
    pub raw: String,
}

impl DialecticTrace {
    pub fn section(&self, section: Section) -> &str {
        match section {
            Section::Extraction => &self.extraction,
            Section::Explanation => &self.explanation,
            Section::Argumentation => &self.argumentation,
            Section::Answer => &self.answer,
        }
    }

    /// Rebuilds a text from the parsed segments using the prompt's header spellings.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|(section, body)| format!("{}\n{}", section.header(), body))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "section")]
pub enum FailureReason {
    MissingSection(Section),
    DuplicateSection(Section),
    OutOfOrder,
    NoCitations,
    EmptyAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub sections_found: BTreeSet<Section>,
    pub citations: Vec<u32>,
    pub if_pass: bool,
    pub failure_reasons: Vec<FailureReason>,
}

#[derive(Debug, Clone, Copy)]
struct HeaderHit {
    section: Section,
    line_start: usize,
    body_start: usize,
}

fn strip_emphasis(s: &str) -> &str {
    s.trim_start_matches(['*', '_'])
}

/// Recognizes a header at the start of `line`; returns the section and the
/// byte offset where the body starts.
fn match_header(line: &str) -> Option<(Section, usize)> {
    let indent = line.len() - line.trim_start().len();
    let rest = strip_emphasis(&line[indent..]);
    let offset = line.len() - rest.len();
    for &(name, section) in HEADER_NAMES {
        let Some(after) = rest.strip_prefix(name) else {
            continue;
        };
        let after_emphasis = strip_emphasis(after);
        let (after_colon, had_colon) = match after_emphasis.strip_prefix(':') {
            Some(a) => (strip_emphasis(a), true),
            None => (after_emphasis, false),
        };
        let boundary_ok = had_colon || after_colon.is_empty() || after_colon.starts_with(char::is_whitespace);
        if !boundary_ok {
            continue;
        }
        let consumed = rest.len() - after_colon.len();
        return Some((section, offset + consumed));
    }
    None
}

fn find_headers(raw: &str) -> Vec<HeaderHit> {
    let mut hits = Vec::new();
    let mut pos = 0;
    for line in raw.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if let Some((section, body)) = match_header(content) {
            hits.push(HeaderHit {
                section,
                line_start: pos,
                body_start: pos + body,
            });
        }
        pos += line.len();
    }
    hits
}

fn bodies<'a>(raw: &'a str, hits: &[HeaderHit]) -> Vec<(Section, &'a str)> {
    hits.iter()
        .enumerate()
        .map(|(i, hit)| {
            let end = hits.get(i + 1).map_or(raw.len(), |next| next.line_start);
            (hit.section, raw[hit.body_start..end].trim())
        })
        .collect()
}

/// Splits a raw output into sections, recording deviations instead of failing.
///
/// When a section occurs more than once, the last occurrence fills the trace
/// field. Verdicts cover documents 1 up to the highest index cited in the
/// explanation; use [`parse_trace_with_docs`] when the document count is known.
pub fn parse_trace(raw: &str) -> Result<(DialecticTrace, ParseReport), ParseError> {
    parse_trace_with_docs(raw, None)
}

pub fn parse_trace_with_docs(raw: &str, n_docs: Option<usize>) -> Result<(DialecticTrace, ParseReport), ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyOutput);
    }
    let hits = find_headers(raw);
    if hits.is_empty() {
        return Err(ParseError::NoSectionsFound);
    }
    let segments = bodies(raw, &hits);

    let mut fields: [String; 4] = Default::default();
    for (section, body) in &segments {
        fields[*section as usize] = (*body).to_owned();
    }
    let [extraction, explanation, argumentation, answer] = fields;

    let mut failure_reasons = Vec::new();
    let sections_found: BTreeSet<Section> = segments.iter().map(|(s, _)| *s).collect();
    for section in Section::ALL {
        if !sections_found.contains(&section) {
            failure_reasons.push(FailureReason::MissingSection(section));
        }
    }
    let mut seen = BTreeSet::new();
    for (section, _) in &segments {
        if !seen.insert(*section) {
            let reason = FailureReason::DuplicateSection(*section);
            if !failure_reasons.contains(&reason) {
                failure_reasons.push(reason);
            }
        }
    }
    if segments.windows(2).any(|w| w[1].0 < w[0].0) {
        failure_reasons.push(FailureReason::OutOfOrder);
    }
    let citations = extract_citations(&explanation);
    if sections_found.contains(&Section::Explanation) && citations.is_empty() {
        failure_reasons.push(FailureReason::NoCitations);
    }
    if sections_found.contains(&Section::Answer) && answer.is_empty() {
        failure_reasons.push(FailureReason::EmptyAnswer);
    }

    let n = n_docs.unwrap_or_else(|| citations.iter().copied().max().unwrap_or(0) as usize);
    let verdicts = classify_verdicts(&explanation, n);

    let trace = DialecticTrace {
        extraction,
        explanation,
        argumentation,
        answer,
        verdicts,
        segments: segments.iter().map(|(s, b)| (*s, (*b).to_owned())).collect(),
        raw: raw.to_owned(),
    };
    let report = ParseReport {
        sections_found,
        citations,
        if_pass: failure_reasons.is_empty(),
        failure_reasons,
    };
    Ok((trace, report))
}

/// Byte offset of the line holding the first recognized section header.
pub fn first_header_offset(raw: &str) -> Option<usize> {
    find_headers(raw).first().map(|h| h.line_start)
}

/// Whether the output carries an `#Answer` header anywhere.
pub fn has_answer_header(raw: &str) -> bool {
    find_headers(raw).iter().any(|h| h.section == Section::Answer)
}

/// Text after the last `#Answer` header up to the next header, or the last
/// non-empty line when the output has no answer header.
pub fn extract_final_answer(raw: &str) -> Result<String, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::EmptyOutput);
    }
    let hits = find_headers(raw);
    if let Some(pos) = hits.iter().rposition(|h| h.section == Section::Answer) {
        let end = hits.get(pos + 1).map_or(raw.len(), |next| next.line_start);
        return Ok(raw[hits[pos].body_start..end].trim().to_owned());
    }
    Ok(raw
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or_default()
        .to_owned())
}

/// Every bracketed positive integer `[n]`, in order, duplicates kept.
pub fn extract_citations(text: &str) -> Vec<u32> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let digits_end = bytes[i + 1..]
                .iter()
                .position(|b| !b.is_ascii_digit())
                .map_or(bytes.len(), |p| i + 1 + p);
            if digits_end > i + 1 && bytes.get(digits_end) == Some(&b']') {
                if let Ok(n) = text[i + 1..digits_end].parse::<u32>() {
                    if n > 0 {
                        out.push(n);
                    }
                }
                i = digits_end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '\n' | '。' | '！' | '？')
}

fn sentence_relevance(sentence: &str) -> Relevance {
    let lower = sentence.to_lowercase();
    if lower.contains("irrelevant") {
        return Relevance::Irrelevant;
    }
    if lower.contains("partially relevant") {
        return Relevance::PartiallyRelevant;
    }
    let mut search = 0;
    while let Some(found) = lower[search..].find("relevant") {
        let at = search + found;
        let preceded_by_letter = lower[..at].chars().next_back().is_some_and(char::is_alphabetic);
        if !preceded_by_letter {
            return Relevance::Relevant;
        }
        search = at + "relevant".len();
    }
    Relevance::Unstated
}

fn quoted_spans(sentence: &str) -> Vec<String> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, char)> = None;
    for (i, c) in sentence.char_indices() {
        match (open, c) {
            (None, '"') => open = Some((i + 1, '"')),
            (None, '“') => open = Some((i + c.len_utf8(), '”')),
            (Some((start, close)), c) if c == close => {
                let span = sentence[start..i].trim();
                if !span.is_empty() {
                    spans.push(span.to_owned());
                }
                open = None;
            }
            _ => {}
        }
    }
    spans
}

/// Per-document relevance from the explanation section.
///
/// Sentences end at `.`, `!`, `?` (and CJK equivalents) or a line break. A
/// sentence without citations refers to the documents cited by the previous
/// sentence of the same paragraph. When several sentences speak about a
/// document, the most specific label wins: irrelevant, then partially
/// relevant, then relevant.
pub fn classify_verdicts(explanation: &str, n_docs: usize) -> Vec<DocVerdict> {
    let mut verdicts: Vec<DocVerdict> = (1..=n_docs as u32)
        .map(|doc_index| DocVerdict {
            doc_index,
            relevance: Relevance::Unstated,
            evidence: Vec::new(),
        })
        .collect();

    let mut paragraph: Vec<&str> = Vec::new();
    let mut paragraphs: Vec<Vec<&str>> = Vec::new();
    for line in explanation.lines() {
        if line.trim().is_empty() {
            if !paragraph.is_empty() {
                paragraphs.push(std::mem::take(&mut paragraph));
            }
        } else {
            paragraph.push(line);
        }
    }
    if !paragraph.is_empty() {
        paragraphs.push(paragraph);
    }

    for lines in paragraphs {
        let text = lines.join("\n");
        let mut context: Vec<u32> = Vec::new();
        for sentence in text.split_inclusive(is_terminator) {
            if sentence.trim().is_empty() {
                continue;
            }
            let cited = extract_citations(sentence);
            if !cited.is_empty() {
                context = cited;
            }
            let relevance = sentence_relevance(sentence);
            let evidence = quoted_spans(sentence);
            for &doc in &context {
                let Some(v) = verdicts.get_mut(doc as usize - 1) else {
                    continue;
                };
                if relevance.priority() > v.relevance.priority() {
                    v.relevance = relevance;
                }
                for span in &evidence {
                    if !v.evidence.contains(span) {
                        v.evidence.push(span.clone());
                    }
                }
            }
        }
    }
    verdicts
}

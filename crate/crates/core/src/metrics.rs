//! Answer matching, language checks and aggregate scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::process::{Command, Stdio};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::dataset::{BorderlinesGroup, QueryRecord};
use crate::sync::Semaphore;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no gold answers to match against")]
    NoGolds,
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("answer text is empty")]
    EmptyAnswer,
    #[error("could not identify the language of {0:?}")]
    UnidentifiableText(String),
    #[error("language identifier command failed: {0}")]
    LidCommand(String),
}

/// NFKC, lowercase, single spaces, and no surrounding whitespace or ASCII punctuation.
pub fn normalize_answer(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

/// True iff some normalized gold occurs inside the normalized generation.
///
/// Golds that normalize to the empty string never match.
pub fn flexible_em(generated: &str, golds: &[String]) -> Result<bool, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    let haystack = normalize_answer(generated);
    Ok(golds.iter().map(|g| normalize_answer(g)).any(|g| !g.is_empty() && haystack.contains(&g)))
}

/// True iff the normalized answer equals some normalized gold.
pub fn strict_em(answer: &str, golds: &[String]) -> Result<bool, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    let answer = normalize_answer(answer);
    Ok(golds.iter().map(|g| normalize_answer(g)).any(|g| !g.is_empty() && g == answer))
}

/// First gold answer that strictly matches, if any.
pub fn strict_match_target<'a>(answer: &str, golds: &'a [String]) -> Option<&'a String> {
    let answer = normalize_answer(answer);
    golds.iter().find(|g| {
        let g = normalize_answer(g);
        !g.is_empty() && g == answer
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Script {
    Latin,
    Cyrillic,
    Arabic,
    Devanagari,
    Bengali,
    Telugu,
    Thai,
    Hangul,
    Kana,
    Han,
}

impl Script {
    fn of(c: char) -> Option<Script> {
        let cp = c as u32;
        let script = match cp {
            0x41..=0x5A | 0x61..=0x7A | 0xC0..=0x24F | 0x1E00..=0x1EFF => Script::Latin,
            0x400..=0x52F => Script::Cyrillic,
            0x600..=0x6FF | 0x750..=0x77F | 0x8A0..=0x8FF | 0xFB50..=0xFDFF | 0xFE70..=0xFEFF => Script::Arabic,
            0x900..=0x97F => Script::Devanagari,
            0x980..=0x9FF => Script::Bengali,
            0xC00..=0xC7F => Script::Telugu,
            0xE00..=0xE7F => Script::Thai,
            0x1100..=0x11FF | 0x3130..=0x318F | 0xAC00..=0xD7AF => Script::Hangul,
            0x3040..=0x30FF => Script::Kana,
            0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF => Script::Han,
            _ => return None,
        };
        // Exclude the multiplication and division signs inside Latin-1.
        if cp == 0xD7 || cp == 0xF7 {
            return None;
        }
        Some(script)
    }

    /// Scripts written without spaces count each character as a unit.
    fn counts_characters(self) -> bool {
        matches!(self, Script::Han | Script::Kana | Script::Hangul | Script::Thai)
    }
}

/// Script units: one per character for Han/Kana/Hangul/Thai, one per word
/// (maximal same-script letter run) for alphabetic scripts.
fn script_units(text: &str) -> BTreeMap<Script, usize> {
    let mut units = BTreeMap::new();
    let mut previous: Option<Script> = None;
    for c in text.chars() {
        let script = Script::of(c).filter(|_| c.is_alphabetic() || !c.is_ascii());
        match script {
            Some(s) if s.counts_characters() => {
                *units.entry(s).or_insert(0) += 1;
            }
            Some(s) if previous != Some(s) => {
                *units.entry(s).or_insert(0) += 1;
            }
            _ => {}
        }
        previous = script;
    }
    units
}

const LATIN_STOPWORDS: &[(&str, &[&str])] = &[
    ("de", &["der", "die", "das", "und", "ist", "ein", "eine", "nicht", "von", "mit", "den", "dem", "zu", "im", "auf", "für", "antwort", "wurde", "sich", "des"]),
    ("en", &["the", "is", "of", "and", "to", "in", "was", "it", "that", "for", "by", "with", "as", "on", "answer", "are", "this", "from", "which", "be"]),
    ("es", &["el", "la", "los", "las", "es", "que", "y", "del", "por", "con", "una", "un", "para", "se", "su", "respuesta", "fue", "está", "como", "en"]),
    ("fi", &["ja", "on", "ei", "se", "että", "hän", "oli", "ovat", "mutta", "kuin", "tai", "joka", "mikä", "vastaus", "ole", "myös", "sen", "hänen", "olivat", "tämä"]),
    ("fr", &["le", "les", "est", "et", "du", "des", "une", "qui", "dans", "pour", "pas", "au", "sur", "réponse", "ce", "il", "elle", "sont", "avec", "été"]),
    ("it", &["il", "lo", "gli", "è", "e", "della", "di", "che", "per", "non", "una", "sono", "nel", "alla", "risposta", "dei", "anche", "come", "questo", "stato"]),
    ("pt", &["o", "os", "as", "é", "que", "do", "da", "em", "um", "uma", "para", "não", "com", "dos", "resposta", "foi", "são", "pelo", "pela", "seu"]),
];

fn vote_latin(text: &str) -> Option<&'static str> {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .collect();
    let mut best: Option<(&'static str, usize)> = None;
    let mut tied = false;
    for (lang, words) in LATIN_STOPWORDS {
        let hits = tokens.iter().filter(|t| words.contains(t)).count();
        if hits == 0 {
            continue;
        }
        match best {
            Some((_, top)) if hits < top => {}
            Some((_, top)) if hits == top => tied = true,
            _ => {
                best = Some((lang, hits));
                tied = false;
            }
        }
    }
    if tied {
        None
    } else {
        best.map(|(lang, _)| lang)
    }
}

fn dominant_script(text: &str) -> Option<(Script, bool)> {
    let units = script_units(text);
    let has_kana = units.contains_key(&Script::Kana);
    let mut merged: BTreeMap<Script, usize> = BTreeMap::new();
    for (script, n) in units {
        let key = if has_kana && script == Script::Han { Script::Kana } else { script };
        *merged.entry(key).or_insert(0) += n;
    }
    let top = merged.values().copied().max()?;
    let leaders: Vec<Script> = merged.iter().filter(|(_, &n)| n == top).map(|(&s, _)| s).collect();
    match leaders.as_slice() {
        [single] => Some((*single, has_kana)),
        _ => None,
    }
}

fn script_of_language(code: &str) -> Option<Script> {
    Some(match code {
        "zh" => Script::Han,
        "ja" => Script::Kana,
        "ko" => Script::Hangul,
        "ar" => Script::Arabic,
        "ru" => Script::Cyrillic,
        "th" => Script::Thai,
        "bn" => Script::Bengali,
        "te" => Script::Telugu,
        "hi" => Script::Devanagari,
        "en" | "es" | "de" | "fr" | "it" | "pt" | "fi" => Script::Latin,
        _ => return None,
    })
}

/// Heuristic language identification over the evaluation languages.
pub fn classify_builtin(text: &str) -> String {
    let Some((script, _)) = dominant_script(text) else {
        return UNDETERMINED.into();
    };
    let code = match script {
        Script::Latin => vote_latin(text),
        Script::Cyrillic => Some("ru"),
        Script::Arabic => Some("ar"),
        Script::Devanagari => Some("hi"),
        Script::Bengali => Some("bn"),
        Script::Telugu => Some("te"),
        Script::Thai => Some("th"),
        Script::Hangul => Some("ko"),
        Script::Kana => Some("ja"),
        Script::Han => Some("zh"),
    };
    code.unwrap_or(UNDETERMINED).to_owned()
}

pub const UNDETERMINED: &str = "und";

pub const BUILTIN_LANGUAGES: &[&str] = &[
    "ar", "bn", "de", "en", "es", "fi", "fr", "hi", "it", "ja", "ko", "pt", "ru", "te", "th", "zh",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LidKind {
    BuiltinHeuristic,
    /// A shell command reading UTF-8 text on stdin and printing one language code.
    ExternalCommand { command: String, max_workers: usize },
}

/// Pluggable language identifier.
#[derive(Debug)]
pub struct LanguageIdentifier {
    kind: LidKind,
    supported_langs: BTreeSet<String>,
    workers: Semaphore,
}

impl LanguageIdentifier {
    pub fn builtin() -> Self {
        Self::new(LidKind::BuiltinHeuristic, BUILTIN_LANGUAGES.iter().map(|s| s.to_string()).collect())
    }

    pub fn external(command: impl Into<String>, max_workers: usize) -> Self {
        Self::new(
            LidKind::ExternalCommand {
                command: command.into(),
                max_workers: max_workers.max(1),
            },
            BUILTIN_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn new(kind: LidKind, supported_langs: BTreeSet<String>) -> Self {
        let limit = match &kind {
            LidKind::ExternalCommand { max_workers, .. } => *max_workers,
            LidKind::BuiltinHeuristic => 1,
        };
        Self {
            kind,
            supported_langs,
            workers: Semaphore::new(limit),
        }
    }

    /// Parses a `builtin` or `cmd:<command>` descriptor.
    pub fn from_spec(spec: &str) -> Option<Self> {
        if spec == "builtin" {
            Some(Self::builtin())
        } else {
            spec.strip_prefix("cmd:").map(|cmd| Self::external(cmd, 4))
        }
    }

    pub fn kind(&self) -> &LidKind {
        &self.kind
    }

    pub fn supported_langs(&self) -> &BTreeSet<String> {
        &self.supported_langs
    }

    /// A supported language code, or `"und"`.
    pub fn classify(&self, text: &str) -> Result<String, MetricsError> {
        let code = match &self.kind {
            LidKind::BuiltinHeuristic => classify_builtin(text),
            LidKind::ExternalCommand { command, .. } => {
                let _permit = self.workers.acquire();
                run_lid_command(command, text)?
            }
        };
        if self.supported_langs.contains(&code) {
            Ok(code)
        } else {
            Ok(UNDETERMINED.into())
        }
    }
}

fn run_lid_command(command: &str, text: &str) -> Result<String, MetricsError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| MetricsError::LidCommand(e.to_string()))?;
    if let Some(mut stdin) = child.stdin.take() {
        stdin
            .write_all(text.as_bytes())
            .map_err(|e| MetricsError::LidCommand(e.to_string()))?;
    }
    let mut stdout = String::new();
    if let Some(mut out) = child.stdout.take() {
        out.read_to_string(&mut stdout)
            .map_err(|e| MetricsError::LidCommand(e.to_string()))?;
    }
    let status = child.wait().map_err(|e| MetricsError::LidCommand(e.to_string()))?;
    if !status.success() {
        return Err(MetricsError::LidCommand(format!("exited with {status}")));
    }
    Ok(stdout.trim().to_owned())
}

/// Whether the answer is written in the expected language.
///
/// An undetermined classification is still decidable (as `false`) when the
/// expected language uses a different script from the one the text is written in.
pub fn correct_language(answer: &str, expected: &str, lid: &LanguageIdentifier) -> Result<bool, MetricsError> {
    if answer.trim().is_empty() {
        return Err(MetricsError::EmptyAnswer);
    }
    let code = lid.classify(answer)?;
    if code != UNDETERMINED {
        return Ok(code == expected);
    }
    match (script_of_language(expected), dominant_script(answer)) {
        (Some(want), Some((got, _))) if want != got => Ok(false),
        _ => Err(MetricsError::UnidentifiableText(answer.to_owned())),
    }
}

/// One scored inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub query_id: String,
    pub lang: String,
    pub answer_text: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub controller: Option<String>,
    pub flexible_match: bool,
    pub strict_match: bool,
    #[serde(default)]
    pub language_ok: Option<bool>,
    #[serde(default)]
    pub if_pass: Option<bool>,
}

impl ScoredRecord {
    /// Scores `answer` for `query`. BorderLines records are matched against the controller.
    pub fn score(
        query: &QueryRecord,
        answer: &str,
        if_pass: Option<bool>,
        lid: Option<&LanguageIdentifier>,
    ) -> Result<Self, MetricsError> {
        let targets = query.scoring_targets();
        let language_ok = match lid {
            Some(lid) if !answer.trim().is_empty() => correct_language(answer, &query.lang, lid).ok(),
            _ => None,
        };
        Ok(Self {
            query_id: query.id.clone(),
            lang: query.lang.clone(),
            answer_text: answer.to_owned(),
            gold_answers: query.gold_answers.clone(),
            controller: query.controller.clone(),
            flexible_match: flexible_em(answer, &targets)?,
            strict_match: strict_em(answer, &targets)?,
            language_ok,
            if_pass,
        })
    }
}

/// An exact proportion `hits / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: u64,
    pub total: u64,
}

impl Rate {
    pub fn new(hits: u64, total: u64) -> Self {
        Self { hits, total }
    }

    pub fn fraction(&self) -> Ratio<u64> {
        Ratio::new(self.hits, self.total.max(1))
    }

    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / self.total as f64
        }
    }

    /// Percentage in tenths of a percent, rounded half-up, computed exactly.
    pub fn percent_tenths(&self) -> u64 {
        if self.total == 0 {
            return 0;
        }
        (2 * 1000 * self.hits + self.total) / (2 * self.total)
    }

    pub fn display_percent(&self) -> String {
        format_tenths(self.percent_tenths() as i64)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.display_percent())
    }
}

pub(crate) fn format_tenths(tenths: i64) -> String {
    let sign = if tenths < 0 { "-" } else { "" };
    let abs = tenths.unsigned_abs();
    format!("{sign}{}.{}", abs / 10, abs % 10)
}

/// Difference `b − a` of two rates in tenths of a percent, rounded half away from zero.
pub fn delta_tenths(a: &Rate, b: &Rate) -> i64 {
    let diff = Ratio::new(b.hits as i128 * 1000, b.total.max(1) as i128)
        - Ratio::new(a.hits as i128 * 1000, a.total.max(1) as i128);
    diff.round().to_integer() as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub n: u64,
    pub accuracy: Rate,
    pub strict_accuracy: Rate,
    pub if_rate: Option<Rate>,
    pub cl_rate: Option<Rate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub per_language: BTreeMap<String, MetricsRow>,
    pub overall: MetricsRow,
}

fn row<'a>(records: impl Iterator<Item = &'a ScoredRecord> + Clone) -> MetricsRow {
    let n = records.clone().count() as u64;
    let count = |f: &dyn Fn(&ScoredRecord) -> bool| records.clone().filter(|r| f(r)).count() as u64;
    let optional = |get: &dyn Fn(&ScoredRecord) -> Option<bool>| {
        let known = records.clone().filter(|r| get(r).is_some()).count() as u64;
        let yes = records.clone().filter(|r| get(r) == Some(true)).count() as u64;
        (known > 0).then(|| Rate::new(yes, known))
    };
    MetricsRow {
        n,
        accuracy: Rate::new(count(&|r| r.flexible_match), n),
        strict_accuracy: Rate::new(count(&|r| r.strict_match), n),
        if_rate: optional(&|r| r.if_pass),
        cl_rate: optional(&|r| r.language_ok),
    }
}

/// Per-language and overall accuracy, IF and CL rates.
pub fn aggregate(records: &[ScoredRecord]) -> Result<MetricsTable, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let langs: BTreeSet<&str> = records.iter().map(|r| r.lang.as_str()).collect();
    let per_language = langs
        .into_iter()
        .map(|lang| (lang.to_owned(), row(records.iter().filter(move |r| r.lang == lang))))
        .collect();
    Ok(MetricsTable {
        per_language,
        overall: row(records.iter()),
    })
}

/// Whether an answer names the controller (or one of its aliases).
pub fn names_controller(answer: &str, controller: &str, aliases: &[String]) -> bool {
    let haystack = normalize_answer(answer);
    std::iter::once(controller)
        .chain(aliases.iter().map(String::as_str))
        .map(normalize_answer)
        .any(|c| !c.is_empty() && haystack.contains(&c))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAnswers {
    pub en: String,
    pub x: String,
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agreement {
    /// Groups whose English answer names the controller.
    pub english: Rate,
    /// Individual answers, over all three languages, naming the controller.
    pub all_languages: Rate,
}

impl Agreement {
    pub fn pct_en(&self) -> f64 {
        self.english.percent()
    }

    pub fn pct_xyen(&self) -> f64 {
        self.all_languages.percent()
    }
}

pub fn borderlines_agreement(groups: &[(BorderlinesGroup, GroupAnswers)]) -> Result<Agreement, MetricsError> {
    if groups.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut english = 0;
    let mut all = 0;
    for (group, answers) in groups {
        let aliases = group.controller_aliases();
        let hit = |a: &str| names_controller(a, &group.controller, &aliases);
        if hit(&answers.en) {
            english += 1;
        }
        all += [&answers.en, &answers.x, &answers.y].iter().filter(|a| hit(a)).count() as u64;
    }
    let n = groups.len() as u64;
    Ok(Agreement {
        english: Rate::new(english, n),
        all_languages: Rate::new(all, 3 * n),
    })
}

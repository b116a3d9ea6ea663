use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_results, ResultRecord, RunError, RunMode, RunStatus};
use crate::dataset::{group_borderlines, load_dataset};
use crate::metrics::{
    aggregate, borderlines_agreement, correct_language, delta_tenths, GroupAnswers, LanguageIdentifier,
    MetricsRow, MetricsTable, Rate,
};

/// Metrics of one results file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTable {
    pub path: String,
    pub mode: RunMode,
    pub ablated_steps: Vec<u8>,
    pub records: usize,
    pub errors: usize,
    pub metrics: MetricsTable,
}

impl RunTable {
    pub fn label(&self) -> String {
        if self.ablated_steps.is_empty() {
            self.mode.to_string()
        } else {
            let steps: Vec<String> = self.ablated_steps.iter().map(u8::to_string).collect();
            format!("{} w/o step {}", self.mode, steps.join(","))
        }
    }
}

/// Differences in tenths of a percentage point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub lang: String,
    pub accuracy: i64,
    pub strict_accuracy: i64,
    pub if_rate: Option<i64>,
    pub cl_rate: Option<i64>,
}

/// `other − base` per language and overall.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub base: String,
    pub other: String,
    pub rows: Vec<DeltaRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub runs: Vec<RunTable>,
    pub deltas: Vec<DeltaTable>,
    /// Language identifier used to recompute CL, when one was given.
    pub lid: Option<String>,
}

fn file_mode(path: &Path, records: &[ResultRecord]) -> Result<RunMode, RunError> {
    let modes: BTreeSet<String> = records.iter().map(|r| r.mode.to_string()).collect();
    match records.first() {
        Some(first) if modes.len() == 1 => Ok(first.mode),
        Some(_) => Err(RunError::SchemaMismatch(format!(
            "{} mixes modes {}",
            path.display(),
            modes.into_iter().collect::<Vec<_>>().join(", ")
        ))),
        None => Err(RunError::Metrics(crate::metrics::MetricsError::EmptyInput)),
    }
}

fn delta_row(lang: &str, base: &MetricsRow, other: &MetricsRow) -> DeltaRow {
    let opt = |a: Option<Rate>, b: Option<Rate>| match (a, b) {
        (Some(a), Some(b)) => Some(delta_tenths(&a, &b)),
        _ => None,
    };
    DeltaRow {
        lang: lang.to_string(),
        accuracy: delta_tenths(&base.accuracy, &other.accuracy),
        strict_accuracy: delta_tenths(&base.strict_accuracy, &other.strict_accuracy),
        if_rate: opt(base.if_rate, other.if_rate),
        cl_rate: opt(base.cl_rate, other.cl_rate),
    }
}

fn delta_table(base: &RunTable, other: &RunTable) -> DeltaTable {
    let mut rows: Vec<DeltaRow> = base
        .metrics
        .per_language
        .iter()
        .filter_map(|(lang, b)| other.metrics.per_language.get(lang).map(|o| delta_row(lang, b, o)))
        .collect();
    rows.push(delta_row("overall", &base.metrics.overall, &other.metrics.overall));
    DeltaTable {
        base: base.path.clone(),
        other: other.path.clone(),
        rows,
    }
}

/// Metric tables for each results file and, for two or more files, the
/// difference of every later file against the first.
///
/// Files of different modes are rejected unless `force` is set. With `lid`,
/// answer-language correctness is recomputed from the stored answers.
pub fn report(paths: &[PathBuf], force: bool, lid: Option<&LanguageIdentifier>) -> Result<RunReport, RunError> {
    let mut runs = Vec::with_capacity(paths.len());
    let mut first_mode: Option<RunMode> = None;
    for path in paths {
        let mut records = read_results(path)?;
        let mode = file_mode(path, &records)?;
        match first_mode {
            None => first_mode = Some(mode),
            Some(m) if m != mode && !force => {
                return Err(RunError::SchemaMismatch(format!(
                    "{} is {mode} but the first file is {m}; pass --force to compare anyway",
                    path.display()
                )))
            }
            _ => {}
        }
        if let Some(lid) = lid {
            for r in &mut records {
                r.language_ok = if r.final_answer.trim().is_empty() {
                    None
                } else {
                    correct_language(&r.final_answer, &r.lang, lid).ok()
                };
            }
        }
        let scored: Vec<_> = records.iter().map(ResultRecord::scored).collect();
        runs.push(RunTable {
            path: path.display().to_string(),
            mode,
            ablated_steps: records[0].ablated_steps.clone(),
            records: records.len(),
            errors: records.iter().filter(|r| r.status == RunStatus::Error).count(),
            metrics: aggregate(&scored)?,
        });
    }
    let deltas = runs.iter().skip(1).map(|other| delta_table(&runs[0], other)).collect();
    Ok(RunReport {
        runs,
        deltas,
        lid: lid.map(|l| format!("{:?}", l.kind())),
    })
}

fn rate_cell(rate: Option<Rate>) -> String {
    rate.map_or_else(|| "-".to_string(), |r| r.display_percent())
}

fn delta_cell(tenths: Option<i64>) -> String {
    match tenths {
        None => "-".to_string(),
        Some(t) => {
            let sign = if t > 0 { "+" } else if t < 0 { "-" } else { "" };
            let abs = t.unsigned_abs();
            format!("{sign}{}.{}", abs / 10, abs % 10)
        }
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_report_text(report: &RunReport) -> String {
    let mut out = String::new();
    for (i, run) in report.runs.iter().enumerate() {
        let _ = writeln!(
            out,
            "run {}: {} ({}, {} records, {} errors)",
            i + 1,
            run.path,
            run.label(),
            run.records,
            run.errors
        );
        let _ = writeln!(out, "{:<10}{:>6}{:>8}{:>8}{:>8}{:>8}", "lang", "n", "acc", "strict", "IF", "CL");
        let rows = run
            .metrics
            .per_language
            .iter()
            .map(|(l, r)| (l.as_str(), r))
            .chain(std::iter::once(("overall", &run.metrics.overall)));
        for (lang, row) in rows {
            let _ = writeln!(
                out,
                "{:<10}{:>6}{:>8}{:>8}{:>8}{:>8}",
                lang,
                row.n,
                row.accuracy.display_percent(),
                row.strict_accuracy.display_percent(),
                rate_cell(row.if_rate),
                rate_cell(row.cl_rate)
            );
        }
        out.push('\n');
    }
    for (i, delta) in report.deltas.iter().enumerate() {
        let _ = writeln!(out, "delta run {} - run 1 ({} vs {})", i + 2, delta.other, delta.base);
        let _ = writeln!(out, "{:<10}{:>8}{:>8}{:>8}{:>8}", "lang", "acc", "strict", "IF", "CL");
        for row in &delta.rows {
            let _ = writeln!(
                out,
                "{:<10}{:>8}{:>8}{:>8}{:>8}",
                row.lang,
                delta_cell(Some(row.accuracy)),
                delta_cell(Some(row.strict_accuracy)),
                delta_cell(row.if_rate),
                delta_cell(row.cl_rate)
            );
        }
        out.push('\n');
    }
    out
}

/// Controller agreement across the three language versions of each group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub groups: usize,
    pub english: Rate,
    pub all_languages: Rate,
    pub pct_en: String,
    pub pct_xyen: String,
}

fn answers_by_id(path: &Path) -> Result<HashMap<String, String>, RunError> {
    Ok(read_results(path)?
        .into_iter()
        .map(|r| (r.query_id, r.final_answer))
        .collect())
}

pub fn agreement_report(
    results_en: &Path,
    results_x: &Path,
    results_y: &Path,
    dataset: &Path,
) -> Result<AgreementReport, RunError> {
    let groups = group_borderlines(&load_dataset(dataset)?)?;
    let en = answers_by_id(results_en)?;
    let x = answers_by_id(results_x)?;
    let y = answers_by_id(results_y)?;
    let mut paired = Vec::with_capacity(groups.len());
    for group in groups {
        let answer = |map: &HashMap<String, String>, id: &str| {
            map.get(id)
                .cloned()
                .ok_or_else(|| RunError::GroupCoverageMismatch(group.group_id.clone()))
        };
        let answers = GroupAnswers {
            en: answer(&en, &group.english.id)?,
            x: answer(&x, &group.lang_x.id)?,
            y: answer(&y, &group.lang_y.id)?,
        };
        paired.push((group, answers));
    }
    let agreement = borderlines_agreement(&paired)?;
    Ok(AgreementReport {
        groups: paired.len(),
        pct_en: agreement.english.display_percent(),
        pct_xyen: agreement.all_languages.display_percent(),
        english: agreement.english,
        all_languages: agreement.all_languages,
    })
}

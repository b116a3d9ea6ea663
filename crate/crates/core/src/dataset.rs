//! Line-delimited question datasets and BorderLines grouping.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "mkqa-17-es", "lang": "es", "question": "...", "answers": ["..."]}
//! {"id": "bl-3-en", "lang": "en", "question": "...", "answers": [], "group_id": "bl-3", "controller": "Russia"}
//! ```
//!
//! `group_id`, `controller` and `metadata` are optional. Blank lines are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang;

/// Metadata key holding `|`-separated alternative names for the controller.
pub const CONTROLLER_ALIASES_KEY: &str = "controller_aliases";
/// Metadata key that pins a non-English BorderLines record to side `x` or `y`.
pub const BORDERLINES_SIDE_KEY: &str = "side";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("dataset contains no records")]
    EmptyDataset,
    #[error("BorderLines group {group_id:?} has {count} usable members, expected 3 including English")]
    IncompleteGroup { group_id: String, count: usize },
    #[error("BorderLines group {group_id:?} is inconsistent: {reason}")]
    InconsistentGroup { group_id: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A question with its gold answers, or a BorderLines question with its controller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub lang: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, lang: impl Into<String>, question: impl Into<String>, golds: Vec<String>) -> Self {
        Self {
            id: id.into(),
            lang: lang.into(),
            question: question.into(),
            gold_answers: golds,
            group_id: None,
            controller: None,
            metadata: BTreeMap::new(),
        }
    }

    /// Strings an answer is scored against: the gold answers, or the controller
    /// (plus aliases) for BorderLines records.
    pub fn scoring_targets(&self) -> Vec<String> {
        if !self.gold_answers.is_empty() {
            return self.gold_answers.clone();
        }
        let mut targets: Vec<String> = self.controller.iter().cloned().collect();
        targets.extend(self.controller_aliases());
        targets
    }

    pub fn controller_aliases(&self) -> Vec<String> {
        self.metadata
            .get(CONTROLLER_ALIASES_KEY)
            .map(|raw| {
                raw.split('|')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_owned)
                    .collect()
            })
            .unwrap_or_default()
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if !lang::is_well_formed(&self.lang) {
            return Err(format!("invalid language code {:?}", self.lang));
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        let has_golds = !self.gold_answers.is_empty();
        let has_controller = self.controller.is_some();
        if has_golds == has_controller {
            return Err(if has_golds {
                "record has both gold answers and a controller".into()
            } else {
                "record has neither gold answers nor a controller".into()
            });
        }
        if self.group_id.is_some() && !has_controller {
            return Err("group_id requires a controller".into());
        }
        Ok(())
    }
}

/// The English, X and Y language variants of one BorderLines question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorderlinesGroup {
    pub group_id: String,
    pub english: QueryRecord,
    pub lang_x: QueryRecord,
    pub lang_y: QueryRecord,
    pub controller: String,
}

impl BorderlinesGroup {
    pub fn members(&self) -> [&QueryRecord; 3] {
        [&self.english, &self.lang_x, &self.lang_y]
    }

    pub fn controller_aliases(&self) -> Vec<String> {
        let mut aliases = Vec::new();
        for record in self.members() {
            for alias in record.controller_aliases() {
                if !aliases.contains(&alias) {
                    aliases.push(alias);
                }
            }
        }
        aliases
    }
}

pub fn parse_dataset(text: &str) -> Result<Vec<QueryRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(line).map_err(|e| DatasetError::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|reason| DatasetError::MalformedRecord { line_no, reason })?;
        if !lang::is_known(&record.lang) {
            log::warn!("line {line_no}: language {:?} is outside the known language set", record.lang);
        }
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId(record.id));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, DatasetError> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn serialize_dataset(records: &[QueryRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("query records always serialize"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[QueryRecord]) -> Result<(), DatasetError> {
    let mut file = fs::File::create(path)?;
    file.write_all(serialize_dataset(records).as_bytes())?;
    Ok(())
}

/// Collects the records carrying a `group_id` into English/X/Y triples.
///
/// Groups come out in order of first appearance. Within a group the two
/// non-English records are assigned to X and Y by their `side` metadata when
/// present, otherwise by order of appearance.
pub fn group_borderlines(records: &[QueryRecord]) -> Result<Vec<BorderlinesGroup>, DatasetError> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<&QueryRecord>> = HashMap::new();
    for record in records {
        if let Some(gid) = record.group_id.as_deref() {
            let entry = members.entry(gid).or_default();
            if entry.is_empty() {
                order.push(gid);
            }
            entry.push(record);
        }
    }

    let mut groups = Vec::with_capacity(order.len());
    for gid in order {
        let group = &members[gid];
        let incomplete = || DatasetError::IncompleteGroup {
            group_id: gid.to_owned(),
            count: group.len(),
        };
        if group.len() != 3 {
            return Err(incomplete());
        }
        let english: Vec<&QueryRecord> = group.iter().copied().filter(|r| r.lang == "en").collect();
        if english.len() != 1 {
            return Err(incomplete());
        }
        let mut others: Vec<&QueryRecord> = group.iter().copied().filter(|r| r.lang != "en").collect();
        let side_of = |r: &QueryRecord| r.metadata.get(BORDERLINES_SIDE_KEY).cloned();
        if side_of(others[0]).as_deref() == Some("y") || side_of(others[1]).as_deref() == Some("x") {
            others.swap(0, 1);
        }
        let inconsistent = |reason: &str| DatasetError::InconsistentGroup {
            group_id: gid.to_owned(),
            reason: reason.to_owned(),
        };
        if others[0].lang == others[1].lang {
            return Err(inconsistent("language X and language Y are the same"));
        }
        let controller = english[0].controller.clone().ok_or_else(|| inconsistent("missing controller"))?;
        if group.iter().any(|r| r.controller.as_deref() != Some(controller.as_str())) {
            return Err(inconsistent("members disagree on the controller"));
        }
        groups.push(BorderlinesGroup {
            group_id: gid.to_owned(),
            english: english[0].clone(),
            lang_x: others[0].clone(),
            lang_y: others[1].clone(),
            controller,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(id: &str, lang: &str, answers: &[&str]) -> String {
        serde_json::json!({"id": id, "lang": lang, "question": format!("q {id}?"), "answers": answers}).to_string()
    }

    fn borderline(id: &str, lang: &str, gid: &str, controller: &str) -> QueryRecord {
        let mut r = QueryRecord::new(id, lang, format!("Is P{gid} a territory of A) X or B) Y? ({lang})"), vec![]);
        r.group_id = Some(gid.into());
        r.controller = Some(controller.into());
        r
    }

    #[test]
    fn loads_800_records_in_order() {
        let text: String = (0..800).map(|i| line(&format!("mlqa-{i}"), "de", &["Berlin"]) + "\n").collect();
        let records = parse_dataset(&text).unwrap();
        assert_eq!(records.len(), 800);
        assert_eq!(records[0].id, "mlqa-0");
        assert_eq!(records[799].id, "mlqa-799");
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(parse_dataset(""), Err(DatasetError::EmptyDataset)));
        assert!(matches!(parse_dataset("\n\n"), Err(DatasetError::EmptyDataset)));
    }

    #[test]
    fn unscoreable_record_is_malformed() {
        let text = line("a", "en", &[]);
        match parse_dataset(&text) {
            Err(DatasetError::MalformedRecord { line_no, .. }) => assert_eq!(line_no, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{}\n{}\n", line("a", "en", &["x"]), line("a", "es", &["y"]));
        assert!(matches!(parse_dataset(&text), Err(DatasetError::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n{{not json\n", line("a", "en", &["x"]));
        assert!(matches!(parse_dataset(&text), Err(DatasetError::MalformedRecord { line_no: 2, .. })));
    }

    #[test]
    fn group_id_without_controller_is_malformed() {
        let text = r#"{"id":"a","lang":"en","question":"q?","answers":["x"],"group_id":"g"}"#;
        assert!(matches!(parse_dataset(text), Err(DatasetError::MalformedRecord { .. })));
    }

    #[test]
    fn unknown_language_is_accepted() {
        let records = parse_dataset(&line("a", "sw", &["x"])).unwrap();
        assert_eq!(records[0].lang, "sw");
    }

    #[test]
    fn groups_sixty_records_into_twenty_triples() {
        let mut records = Vec::new();
        for g in 0..20 {
            let gid = format!("bl-{g}");
            records.push(borderline(&format!("{gid}-en"), "en", &gid, "Russia"));
            records.push(borderline(&format!("{gid}-ru"), "ru", &gid, "Russia"));
            records.push(borderline(&format!("{gid}-zh"), "zh", &gid, "Russia"));
        }
        records.push(QueryRecord::new("plain", "en", "q?", vec!["a".into()]));
        let groups = group_borderlines(&records).unwrap();
        assert_eq!(groups.len(), 20);
        assert_eq!(groups[3].group_id, "bl-3");
        assert_eq!(groups[3].lang_x.lang, "ru");
        assert_eq!(groups[3].lang_y.lang, "zh");
    }

    #[test]
    fn no_grouped_records_gives_no_groups() {
        let records = vec![QueryRecord::new("a", "en", "q?", vec!["a".into()])];
        assert!(group_borderlines(&records).unwrap().is_empty());
    }

    #[test]
    fn missing_english_member_is_incomplete() {
        let records = vec![
            borderline("1", "ru", "g", "Russia"),
            borderline("2", "zh", "g", "Russia"),
            borderline("3", "ja", "g", "Russia"),
        ];
        assert!(matches!(
            group_borderlines(&records),
            Err(DatasetError::IncompleteGroup { count: 3, .. })
        ));
        let pair = vec![borderline("1", "en", "g", "Russia"), borderline("2", "zh", "g", "Russia")];
        assert!(matches!(
            group_borderlines(&pair),
            Err(DatasetError::IncompleteGroup { count: 2, .. })
        ));
    }

    #[test]
    fn side_metadata_orders_x_and_y() {
        let mut zh = borderline("2", "zh", "g", "Russia");
        zh.metadata.insert(BORDERLINES_SIDE_KEY.into(), "x".into());
        let records = vec![borderline("1", "en", "g", "Russia"), borderline("3", "ru", "g", "Russia"), zh];
        let groups = group_borderlines(&records).unwrap();
        assert_eq!(groups[0].lang_x.lang, "zh");
        assert_eq!(groups[0].lang_y.lang, "ru");
    }

    #[test]
    fn controller_disagreement_is_inconsistent() {
        let records = vec![
            borderline("1", "en", "g", "Russia"),
            borderline("2", "ru", "g", "Russia"),
            borderline("3", "zh", "g", "China"),
        ];
        assert!(matches!(group_borderlines(&records), Err(DatasetError::InconsistentGroup { .. })));
    }

    fn record_strategy() -> impl Strategy<Value = QueryRecord> {
        (
            "[a-z]{2}",
            "\\PC{1,40}",
            prop::collection::vec("\\PC{0,20}", 0..3),
            prop::option::of("\\PC{1,10}"),
            prop::collection::btree_map("[a-z_]{1,8}", "\\PC{0,10}", 0..3),
        )
            .prop_filter("question must have content", |(_, q, _, _, _)| !q.trim().is_empty())
            .prop_map(|(lang, question, golds, group, metadata)| {
                let mut r = QueryRecord::new("", lang, question, golds);
                if r.gold_answers.is_empty() {
                    r.controller = Some("Controller".into());
                    r.group_id = group;
                }
                r.metadata = metadata;
                r
            })
    }

    proptest! {
        #[test]
        fn serialize_then_load_is_identity(mut records in prop::collection::vec(record_strategy(), 1..20)) {
            for (i, r) in records.iter_mut().enumerate() {
                r.id = format!("r{i}");
            }
            let text = serialize_dataset(&records);
            prop_assert_eq!(parse_dataset(&text).unwrap(), records);
        }

        #[test]
        fn grouped_output_covers_grouped_input(n_groups in 0usize..15, n_plain in 0usize..5) {
            let mut records = Vec::new();
            for g in 0..n_groups {
                let gid = format!("g{g}");
                for lang in ["en", "ar", "he"] {
                    records.push(borderline(&format!("{gid}-{lang}"), lang, &gid, "C"));
                }
            }
            for p in 0..n_plain {
                records.push(QueryRecord::new(format!("p{p}"), "en", "q?", vec!["a".into()]));
            }
            let grouped_inputs = records.iter().filter(|r| r.group_id.is_some()).count();
            prop_assert_eq!(group_borderlines(&records).unwrap().len() * 3, grouped_inputs);
        }
    }
}

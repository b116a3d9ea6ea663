use std::fs;
use std::path::{Path, PathBuf};

use drag_core::parser::{
    extract_final_answer, parse_trace, parse_trace_with_docs, FailureReason, ParseError, Relevance, Section,
};
use serde::Deserialize;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/parser")
}

#[derive(Deserialize)]
struct Expected {
    file: String,
    final_answer: String,
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    if_pass: Option<bool>,
    #[serde(default)]
    failure_reasons: Option<Vec<FailureReason>>,
}

#[test]
fn mkqa_example_parses_into_four_sections() {
    let raw = fs::read_to_string(fixtures().join("mkqa_mozart.txt")).unwrap();
    let (trace, report) = parse_trace_with_docs(&raw, Some(5)).unwrap();
    assert!(report.if_pass, "{:?}", report.failure_reasons);
    assert_eq!(report.sections_found, Section::ALL.into_iter().collect());
    assert!(trace.answer.contains("Wolfgang Amadeus Mozart"));
    assert_eq!(report.citations, vec![1, 2, 5, 3, 4]);
    let relevance: Vec<Relevance> = trace.verdicts.iter().map(|v| v.relevance).collect();
    assert_eq!(
        relevance,
        [
            Relevance::Unstated,
            Relevance::Unstated,
            Relevance::Irrelevant,
            Relevance::Irrelevant,
            Relevance::Unstated
        ]
    );
    assert!(trace.verdicts[0].evidence.contains(&"Ah vous dirai-je, Maman".to_string()));
    assert!(extract_final_answer(&raw).unwrap().ends_with("La respuesta es Wolfgang Amadeus Mozart."));
}

#[test]
fn borderlines_example_parses_with_verdicts() {
    let raw = fs::read_to_string(fixtures().join("borderlines_sixty_four_villages.txt")).unwrap();
    let (trace, report) = parse_trace_with_docs(&raw, Some(5)).unwrap();
    assert!(report.if_pass, "{:?}", report.failure_reasons);
    let relevance: Vec<Relevance> = trace.verdicts.iter().map(|v| v.relevance).collect();
    assert_eq!(
        relevance,
        [
            Relevance::Relevant,
            Relevance::Relevant,
            Relevance::Relevant,
            Relevance::Relevant,
            Relevance::PartiallyRelevant
        ]
    );
    let answer = extract_final_answer(&raw).unwrap();
    assert!(answer.ends_with("A) Russia"));
    assert!(answer.starts_with("A) 俄罗斯"));
}

#[test]
fn mutation_fixtures_produce_expected_reports() {
    let dir = fixtures().join("mutations");
    let expected: Vec<Expected> =
        serde_json::from_str(&fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    assert_eq!(expected.len(), 20);
    for case in expected {
        let raw = fs::read_to_string(dir.join(&case.file)).unwrap();
        assert_eq!(extract_final_answer(&raw).unwrap(), case.final_answer, "{}", case.file);
        match case.error.as_deref() {
            Some("no_sections_found") => {
                assert_eq!(parse_trace(&raw).unwrap_err(), ParseError::NoSectionsFound, "{}", case.file);
            }
            Some(other) => panic!("unknown expected error {other}"),
            None => {
                let (_, report) = parse_trace(&raw).unwrap();
                assert_eq!(Some(report.if_pass), case.if_pass, "{}", case.file);
                assert_eq!(Some(report.failure_reasons), case.failure_reasons, "{}", case.file);
            }
        }
    }
}

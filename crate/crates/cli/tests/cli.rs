use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const DIM: usize = 8;

fn drag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drag")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = drag(args);
    assert!(
        out.status.success(),
        "drag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn trace(answer: &str) -> String {
    format!(
        "#Extraction:\nDocument [1] names {answer}.\n\n#Explaination:\nDocument [1] is relevant.\n\n\
         #Dialectic Argumentation:\nNo document disagrees.\n\n#Answer:\n{answer}"
    )
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
    corpus: PathBuf,
    backend: PathBuf,
}

/// Ten English questions; the scripted model answers q07 and q09 wrongly.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut corpus = String::new();
    for i in 0..12 {
        let mut embedding = vec![0.0f32; DIM];
        embedding[i % DIM] = 1.0 + i as f32 / 100.0;
        let doc = json!({"doc_id": format!("d{i:02}"), "title": "", "text": format!("fact {i}"), "lang": "en", "embedding": embedding});
        corpus.push_str(&format!("{doc}\n"));
    }
    let corpus_path = root.join("corpus.jsonl");
    fs::write(&corpus_path, corpus).unwrap();

    let mut dataset = String::new();
    let mut responses = serde_json::Map::new();
    for i in 0..10 {
        let id = format!("q{i:02}");
        let gold = format!("Gold{i}");
        let said = if i == 7 || i == 9 { "Other".to_string() } else { gold.clone() };
        responses.insert(id.clone(), Value::String(trace(&said)));
        dataset.push_str(&format!("{}\n", json!({"id": id, "lang": "en", "question": format!("What is item {i}?"), "answers": [gold]})));
    }
    let dataset_path = root.join("dataset.jsonl");
    fs::write(&dataset_path, dataset).unwrap();
    fs::write(
        root.join("script.json"),
        json!({"responses": responses, "hash_embedding_dim": DIM}).to_string(),
    )
    .unwrap();
    let backend = root.join("backend.toml");
    fs::write(&backend, "kind = \"scripted\"\nmodel = \"toy\"\nscript_file = \"script.json\"\n").unwrap();
    Fixture {
        _dir: dir,
        dataset: dataset_path,
        corpus: corpus_path,
        backend,
        root,
    }
}

fn build_index(f: &Fixture) -> PathBuf {
    let index = f.root.join("index.bin");
    let stdout = ok(&["index", "build", "--corpus", p(&f.corpus), "--out", p(&index), "--dim", "8"]);
    assert!(stdout.contains("12 documents"));
    index
}

#[test]
fn index_run_and_eval() {
    let f = fixture();
    let index = build_index(&f);
    let out = f.root.join("runs/drag.jsonl");
    let stdout = ok(&[
        "run", "--dataset", p(&f.dataset), "--mode", "drag", "--backend", p(&f.backend), "--index", p(&index),
        "--out", p(&out),
    ]);
    assert!(stdout.contains("accuracy 80.0%"), "{stdout}");

    let report = f.root.join("report.json");
    let text = ok(&["eval", "--results", p(&out), "--out", p(&report)]);
    assert!(text.contains("overall"));
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["runs"][0]["metrics"]["overall"]["accuracy"], json!({"hits": 8, "total": 10}));
    assert!(f.root.join("report.json.txt").exists());
}

#[test]
fn rerun_is_byte_identical_and_resumes() {
    let f = fixture();
    let index = build_index(&f);
    let cache = f.root.join("shared_cache.jsonl");
    let a = f.root.join("a.jsonl");
    let b = f.root.join("b.jsonl");
    let base = ["run", "--dataset", p(&f.dataset), "--mode", "rag", "--backend", p(&f.backend), "--index", p(&index), "--cache", p(&cache)];
    ok(&[&base[..], &["--out", p(&a)]].concat());
    ok(&[&base[..], &["--out", p(&b), "--limit", "3"]].concat());
    let resumed = ok(&[&base[..], &["--out", p(&b)]].concat());
    assert!(resumed.contains("7 executed, 3 resumed"), "{resumed}");
    assert!(resumed.contains("7 fully cached"), "{resumed}");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn ablation_eval_prints_deltas() {
    let f = fixture();
    let index = build_index(&f);
    let full = f.root.join("full.jsonl");
    let ablated = f.root.join("ablated.jsonl");
    let base = ["run", "--dataset", p(&f.dataset), "--mode", "drag", "--backend", p(&f.backend), "--index", p(&index)];
    ok(&[&base[..], &["--out", p(&full)]].concat());
    ok(&[&base[..], &["--out", p(&ablated), "--ablate-steps", "3"]].concat());
    let text = ok(&["eval", "--results", p(&full), p(&ablated), "--out", p(&f.root.join("cmp.json"))]);
    assert!(text.contains("w/o step 3"), "{text}");
    assert!(text.contains("delta run 2 - run 1"), "{text}");
}

#[test]
fn invalid_combinations_fail_without_backend_calls() {
    let f = fixture();
    let out = f.root.join("x.jsonl");
    let failed = drag(&["run", "--dataset", p(&f.dataset), "--mode", "rag", "--backend", p(&f.backend), "--out", p(&out)]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("requires an index"));
    let failed = drag(&[
        "run", "--dataset", p(&f.dataset), "--mode", "baseline", "--backend", p(&f.backend), "--perturb", "shuffle",
        "--out", p(&out),
    ]);
    assert!(!failed.status.success());
    assert!(!out.exists());
}

#[test]
fn annotate_exports_approved_demonstrations() {
    let f = fixture();
    let index = build_index(&f);
    let judge = f.root.join("judge.toml");
    fs::write(&judge, "kind = \"scripted\"\nmodel = \"judge\"\n[script]\ndefault_response = \"1\"\n").unwrap();
    let out = f.root.join("sft/drag.jsonl");
    let stdout = ok(&[
        "annotate", "--dataset", p(&f.dataset), "--index", p(&index), "--teacher", p(&f.backend), "--judge", p(&judge),
        "--out", p(&out),
    ]);
    assert!(stdout.contains("8 approved"), "{stdout}");
    let lines: Vec<Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0]["variant"], "drag");
    assert!(lines[0]["training_text"].as_str().unwrap().starts_with("#Extraction:"));

    let baseline = f.root.join("sft/baseline.jsonl");
    ok(&[
        "annotate", "--dataset", p(&f.dataset), "--index", p(&index), "--teacher", p(&f.backend), "--judge", p(&judge),
        "--variant", "sft-baseline", "--fraction", "0.5", "--seed", "3", "--out", p(&baseline),
    ]);
    let first = fs::read(&baseline).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 4);
    ok(&[
        "annotate", "--dataset", p(&f.dataset), "--index", p(&index), "--teacher", p(&f.backend), "--judge", p(&judge),
        "--variant", "sft-baseline", "--fraction", "0.5", "--seed", "3", "--out", p(&baseline),
    ]);
    assert_eq!(fs::read(&baseline).unwrap(), first);
}

#[test]
fn agreement_command() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut dataset = String::new();
    let mut responses = serde_json::Map::new();
    for g in 0..2 {
        for lang in ["en", "ja", "zh"] {
            let id = format!("g{g}-{lang}");
            let who = if g == 1 && lang == "zh" { "Elsewhere" } else { "Ruritania" };
            responses.insert(id.clone(), Value::String(format!("#Answer:\n{who}")));
            dataset.push_str(&format!(
                "{}\n",
                json!({"id": id, "lang": lang, "question": format!("Who controls island {g} ({lang})?"), "answers": [], "group_id": format!("g{g}"), "controller": "Ruritania"})
            ));
        }
    }
    let dataset_path = root.join("bl.jsonl");
    fs::write(&dataset_path, dataset).unwrap();
    let backend = root.join("b.toml");
    fs::write(&backend, "kind = \"scripted\"\nmodel = \"toy\"\nscript_file = \"s.json\"\n").unwrap();
    fs::write(root.join("s.json"), json!({"responses": responses}).to_string()).unwrap();
    let all = fs::read_to_string(&dataset_path).unwrap();
    let lines: Vec<&str> = all.lines().collect();
    let mut outs = Vec::new();
    for lang in ["en", "ja", "zh"] {
        let subset: String = lines.iter().filter(|l| l.contains(&format!("\"lang\":\"{lang}\""))).map(|l| format!("{l}\n")).collect();
        let ds = root.join(format!("{lang}.jsonl"));
        fs::write(&ds, subset).unwrap();
        let out = root.join(format!("{lang}.results.jsonl"));
        ok(&["run", "--dataset", p(&ds), "--mode", "baseline", "--backend", p(&backend), "--out", p(&out)]);
        outs.push(out);
    }
    let report = root.join("agreement.json");
    let stdout = ok(&[
        "agreement", "--en", p(&outs[0]), "--x", p(&outs[1]), "--y", p(&outs[2]), "--dataset", p(&dataset_path),
        "--out", p(&report),
    ]);
    assert!(stdout.contains("en 100.0%"), "{stdout}");
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["pct_xyen"], "83.3");
}

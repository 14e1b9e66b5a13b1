use std::path::Path;
use std::process::{Command, Output};

fn synthnote(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthnote"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SYNTH_EVAL_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synthnote(&["no-such-command"], tmp.path())), 1);
    assert_eq!(code(&synthnote(&["ingest", "--out", "x.jsonl"], tmp.path())), 1);
    let out = synthnote(&["run", "--config", "missing.toml"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
    assert_eq!(code(&synthnote(&["--help"], tmp.path())), 0);
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.jsonl"), "{\"id\": \"a\", \"text\": \"ok\"}\nnot json\n").unwrap();
    let out = synthnote(&["ingest", "--in", "bad.jsonl", "--out", "c.jsonl"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:2"));
}

#[test]
fn backend_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("notes.jsonl"), "{\"id\": \"a\", \"text\": \"Chest pain.\"}\n").unwrap();
    std::fs::write(
        tmp.path().join("http.toml"),
        "kind = \"http_chat\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel_name = \"m\"\nrequire_auth = true\n",
    )
    .unwrap();
    let out = synthnote(
        &["rephrase", "--in", "notes.jsonl", "--out", "s.jsonl", "--backend", "http.toml"],
        tmp.path(),
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SYNTH_EVAL_API_KEY"));
}

#[test]
fn module_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ok = |args: &[&str]| {
        let out = synthnote(args, dir);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["demo", "--out-dir", "demo"]);
    ok(&["ingest", "--in", "demo/notes.jsonl", "--out", "h.jsonl"]);
    ok(&["chunk", "--in", "h.jsonl", "--out", "chunks.jsonl", "--target-words", "40"]);
    ok(&["rephrase", "--in", "h.jsonl", "--out", "s.jsonl", "--mode", "by_chunk", "--target-words", "40"]);
    assert!(dir.join("s.run.json").exists());
    ok(&["eval-intrinsic", "--human", "h.jsonl", "--synthetic", "s.jsonl", "--out", "intrinsic"]);
    ok(&["eval-concepts", "--human", "h.jsonl", "--synthetic", "s.jsonl", "--out", "concepts"]);
    std::fs::write(dir.join("judge.toml"), "kind = \"mock_scripted\"\nscripted = { rule = \"lexical\" }\n").unwrap();
    ok(&["factcheck", "--human", "h.jsonl", "--synthetic", "s.jsonl", "--judge", "judge.toml", "--out", "facts"]);
    ok(&[
        "train-downstream", "--task", "demo/tasks/sepsis.toml", "--setting", "tsts", "--human", "h.jsonl",
        "--synthetic", "s.jsonl", "--seeds", "2", "--out", "exp.json",
    ]);
    ok(&[
        "fairness", "--predictions", "exp.predictions.jsonl", "--corpus", "s.jsonl", "--specs",
        "demo/fairness.toml", "--out", "fair.json",
    ]);
    ok(&["iterate", "--in", "h.jsonl", "--out-dir", "iter", "--rounds", "2"]);

    let intrinsic: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("intrinsic/intrinsic.json")).unwrap()).unwrap();
    assert_eq!(intrinsic["rouge_l"]["f1"], 1.0);
    let facts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("facts/report.json")).unwrap()).unwrap();
    assert_eq!(facts["macro_recall"], 1.0);
    for f in ["facts/facts.jsonl", "facts/verdicts.jsonl", "fair.json", "iter/round_2.jsonl", "iter/drift.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn run_then_report_reemits() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&synthnote(&["demo", "--out-dir", "demo"], dir)), 0);
    let out = synthnote(&["run", "--config", "demo/pipeline.toml", "--n-seeds", "1", "--output-dir", "run"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = synthnote(&["report", "--in", "run/report.json", "--out-dir", "again", "--format", "markdown,json"], dir);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read_to_string(dir.join("run/report.md")).unwrap(),
        std::fs::read_to_string(dir.join("again/report.md")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(dir.join("run/report.json")).unwrap(),
        std::fs::read_to_string(dir.join("again/report.json")).unwrap()
    );
    assert!(!dir.join("again/report.csv").exists());
}

//! End-to-end checks of the parmask binary: the full pipeline from model
//! generation through training and reporting, exit codes, and the
//! machine-readable error envelope.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_parmask"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("stdout has output");
    serde_json::from_str(line).expect("stdout is json")
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    run_ok(
        &[
            "model-gen",
            "--kind",
            "markov",
            "--vocab-size",
            "3",
            "--eos-id",
            "2",
            "--length",
            "5",
            "--seed",
            "11",
            "--out",
            "markov.json",
        ],
        d,
    );

    let out = run_ok(
        &[
            "cache-gen",
            "--model",
            "markov.json",
            "--responses",
            "20",
            "--seed",
            "2",
            "--out",
            "cache.jsonl",
        ],
        d,
    );
    let records = stdout_json(&out)["records"].as_u64().unwrap();
    assert!(records > 0);

    let out = run_ok(
        &[
            "train",
            "--cache",
            "cache.jsonl",
            "--model",
            "markov.json",
            "--epochs",
            "20",
            "--out",
            "ckpt.json",
            "--report-out",
            "report.json",
        ],
        d,
    );
    let train = stdout_json(&out);
    assert!(
        train["final_loss"].as_f64().unwrap() < train["initial_loss"].as_f64().unwrap(),
        "training did not reduce the loss: {train}"
    );

    // decode with exact dependencies, then with the trained predictor
    let out = run_ok(
        &[
            "decode", "--model", "markov.json", "--selector", "demask", "--tau", "0.04",
            "--gamma", "0.9", "--seed", "3", "--trace-out", "trace.jsonl",
        ],
        d,
    );
    let decoded = stdout_json(&out);
    assert_eq!(decoded["sequence"].as_array().unwrap().len(), 5);
    assert!(decoded["in_support"].as_bool().unwrap());
    assert!(d.join("trace.jsonl").exists());

    let out = run_ok(
        &[
            "decode",
            "--model",
            "markov.json",
            "--selector",
            "demask",
            "--checkpoint",
            "ckpt.json",
            "--tau",
            "0.1",
            "--gamma",
            "0.5",
            "--eos-fill",
            "--seed",
            "9",
        ],
        d,
    );
    assert!(stdout_json(&out)["steps"].as_u64().unwrap() <= 5);

    run_ok(
        &[
            "bench",
            "--family",
            "arithmetic-mod",
            "--vocab-size",
            "3",
            "--eos-id",
            "2",
            "--length",
            "2",
            "--prompts",
            "3",
            "--selector",
            "token-order",
            "--tokens-per-step",
            "2",
            "--temperature",
            "1",
            "--top-p",
            "1",
            "--seeds",
            "50",
            "--out",
            "bench.csv",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert!(csv.starts_with("format,config_id,selector,"));
    assert_eq!(csv.lines().count(), 2);

    let out = run_ok(
        &[
            "verify-bound",
            "--instances",
            "120",
            "--seed",
            "5",
            "--out",
            "bound.jsonl",
        ],
        d,
    );
    let verdict = stdout_json(&out);
    assert_eq!(verdict["violations_with_assumption"].as_u64().unwrap(), 0);

    run_ok(
        &[
            "validate-subadd",
            "--instances",
            "60",
            "--seed",
            "1",
            "--out",
            "slack.jsonl",
        ],
        d,
    );

    let out = run_ok(
        &[
            "report",
            "--records",
            "bench.csv",
            "--slack",
            "slack.jsonl",
            "--out",
            "rep",
        ],
        d,
    );
    assert!(d.join("rep/summary.json").exists());
    assert!(d.join("rep/frontier.csv").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("rep/summary.json")).unwrap())
            .unwrap();
    assert!(!summary["slack_tables"].as_array().unwrap().is_empty());
    drop(out);
}

#[test]
fn grid_emits_expected_counts_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["g1", "g2"] {
        run_ok(
            &[
                "grid",
                "--grid",
                "demask",
                "--family",
                "markov",
                "--vocab-size",
                "3",
                "--eos-id",
                "2",
                "--length",
                "4",
                "--model-seed",
                "11",
                "--temperature",
                "1",
                "--top-p",
                "1",
                "--seeds",
                "5",
                "--seed",
                "2",
                "--out",
                name,
            ],
            d,
        );
        let text = std::fs::read_to_string(d.join(name).join("records.csv")).unwrap();
        assert_eq!(text.lines().count(), 61); // header + 60 records
    }
    assert_eq!(
        std::fs::read(d.join("g1/records.csv")).unwrap(),
        std::fs::read(d.join("g2/records.csv")).unwrap()
    );
}

#[test]
fn errors_carry_machine_readable_categories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // config validation: exit 2, invalid-config category
    let out = bin()
        .args(["bench", "--selector", "demask", "--tau=-1", "--out", "x.csv"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["category"], "invalid-config");

    // runtime io error: exit 1, io category
    let out = bin()
        .args(["decode", "--model", "missing.json"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["category"], "io");

    // config file with unknown key: exit 2 and the offending field named
    std::fs::write(
        d.join("bad.json"),
        r#"{"task":{"family":"copy","vocab_size":2,"eos_id":1,"length":2},
            "selector":{"kind":"entropy","k":1},"seeds":5,"bogus":1}"#,
    )
    .unwrap();
    let out = bin()
        .args(["bench", "--config", "bad.json", "--out", "y.csv"])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["category"], "invalid-config");
    assert!(err["error"]["message"].as_str().unwrap().contains("bogus"));
}

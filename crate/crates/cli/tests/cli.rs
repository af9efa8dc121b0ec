use std::path::Path;
use std::process::{Command, Output};

fn autonli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autonli"))
        .current_dir(dir)
        .args(["--seed", "3", "--timestamp", "0"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = autonli(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn records_without_backend(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["provenance"].as_object_mut().unwrap().remove("backend");
            v
        })
        .collect()
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(autonli(dir.path(), &["stats", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        autonli(
            dir.path(),
            &["generate", "--corpus", "c.txt", "--out", "o", "--strategy", "x"]
        )
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        autonli(dir.path(), &["stats", "--data", "missing.jsonl"]).status.code(),
        Some(2)
    );
    std::fs::write(dir.path().join("c.txt"), "A sentence with five words.\n").unwrap();
    let out = autonli(
        dir.path(),
        &[
            "corpus",
            "filter",
            "--input",
            "c.txt",
            "--output",
            "f.txt",
            "--min-tokens",
            "9",
            "--max-tokens",
            "3",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(autonli(dir.path(), &["--version"]).status.success());
}

#[test]
fn generate_check_stats_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "corpus", "--n", "30", "--output", "corpus.txt"]);
    ok(d, &["synth", "pool", "--per-relation", "20", "--output", "pool.jsonl"]);
    ok(
        d,
        &[
            "generate",
            "--corpus",
            "corpus.txt",
            "--pool",
            "pool.jsonl",
            "--strategy",
            "5x4",
            "--backend",
            "mock",
            "--out",
            "gen",
        ],
    );
    for i in 0..4 {
        assert!(d.join(format!("gen/set-{i}.jsonl")).exists());
    }
    let check = ok(d, &["check", "--data", "gen/merged.jsonl"]);
    assert_eq!(String::from_utf8_lossy(&check.stdout).trim(), "60 valid, 0 invalid");

    let stats = ok(
        d,
        &[
            "stats",
            "--data",
            "gen/merged.jsonl",
            "--generation-stats",
            "gen/generation_stats.json",
        ],
    );
    let stats: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["records"], 60);
    assert_eq!(stats["premises"], 30);
    assert_eq!(stats["per_label"]["entailment"], 30);
    assert_eq!(stats["extraction_failure_rate"], 0.0);

    ok(
        d,
        &[
            "generate",
            "--corpus",
            "corpus.txt",
            "--pool",
            "pool.jsonl",
            "--strategy",
            "5x4",
            "--backend",
            "replay",
            "--transcript",
            "gen/transcript.jsonl",
            "--out",
            "replayed",
        ],
    );
    assert_eq!(
        records_without_backend(&d.join("gen/merged.jsonl")),
        records_without_backend(&d.join("replayed/merged.jsonl"))
    );

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("gen/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["timestamp"], "1970-01-01T00:00:00Z");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    let mut lines = std::fs::read_to_string(d.join("gen/merged.jsonl")).unwrap();
    lines.push_str("{\"premise\":\"\"}\n");
    std::fs::write(d.join("broken.jsonl"), lines).unwrap();
    let out = autonli(d, &["check", "--data", "broken.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "60 valid, 1 invalid");
}

#[test]
fn config_file_overrides_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.txt"), "one two three\none two three four five six\n").unwrap();
    std::fs::write(d.join("cfg.toml"), "[filter]\nmin_tokens = 5\nmax_tokens = 8\n").unwrap();
    ok(
        d,
        &[
            "--config", "cfg.toml", "corpus", "filter", "--input", "c.txt", "--output", "f.txt",
        ],
    );
    assert_eq!(std::fs::read_to_string(d.join("f.txt")).unwrap().lines().count(), 1);

    std::fs::write(d.join("bad.toml"), "[filter]\nminimum = 5\n").unwrap();
    let out = autonli(
        d,
        &[
            "--config", "bad.toml", "corpus", "filter", "--input", "c.txt", "--output", "g.txt",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("minimum"));
}

//! The `musa` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn musa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_musa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name).display().to_string()
}

fn toy_manifest() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy/manifest.tsv").display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_every_subcommand() {
    let out = musa(&["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train", "tokenizer-train", "anonymize", "eval", "run-scenario", "export-codes", "plot"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(musa(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(musa(&["eval", "eer"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = musa(&["eval", "eer", "--trials", "/nonexistent/trials.tsv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn eer_of_the_scored_fixture() {
    // Accepting at score >= 0.5 rejects one of three targets and accepts one
    // of three non-targets, so both rates are 1/3 there.
    let dir = tempfile::tempdir().unwrap();
    let out = musa(&["eval", "eer", "--trials", &fixture("scored_trials.tsv"), "--out", dir.path().to_str().unwrap()]);
    ok(&out);
    let r = json(&dir.path().join("results.json"));
    assert!((r["eer"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((r["threshold"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(r["trials"], 6);
    let run = json(&dir.path().join("run.json"));
    assert!(run["command"].as_array().unwrap().iter().any(|a| a == "eer"));
    assert_eq!(run["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn corpus_wer_pools_errors_over_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let out = musa(&[
        "eval",
        "wer",
        "--ref",
        &fixture("ref.txt"),
        "--hyp",
        &fixture("hyp.txt"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    ok(&out);
    let r = json(&dir.path().join("results.json"));
    assert_eq!(r["errors"], 2);
    assert_eq!(r["reference_tokens"], 7);
    assert!((r["wer"].as_f64().unwrap() - 2.0 / 7.0).abs() < 1e-12);
}

#[test]
fn pipeline_on_the_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).display().to_string();
    let manifest = toy_manifest();

    ok(&musa(&["train", "--profile", "toy", "--manifest", &manifest, "--out", &d("train"), "--steps", "1"]));
    for f in ["checkpoint.musa", "tokenizer.tok", "losses.csv", "speakers.tsv", "config.toml", "run.json"] {
        assert!(dir.path().join("train").join(f).is_file(), "train/{f} missing");
    }
    let ckpt = d("train/checkpoint.musa");
    assert!(json(&dir.path().join("train/run.json"))["checkpoint_hash"].is_string());

    ok(&musa(&["anonymize", "--ckpt", &ckpt, "--manifest", &manifest, "--out", &d("anon")]));
    let report = json(&dir.path().join("anon/report.json"));
    assert_eq!(report.as_array().unwrap().len(), 10);
    assert!(dir.path().join("anon/spk_a_0.wav").is_file());
    assert_eq!(musa(&["anonymize", "--ckpt", &ckpt, "--manifest", &manifest, "--alpha", "0.5", "--out", &d("partial")]).status.code(), Some(1));

    ok(&musa(&["eval", "pitch", "--original", &manifest, "--anonymized", &d("anon"), "--out", &d("pitch")]));
    assert!(json(&dir.path().join("pitch/results.json"))["mean_rho"].is_number());

    ok(&musa(&["eval", "gvd", "--original", &manifest, "--anonymized", &d("anon"), "--out", &d("gvd")]));
    assert!(json(&dir.path().join("gvd/results.json"))["gvd_db"].is_number());
    ok(&musa(&["plot", "gvd-matrix", "--matrix", &d("gvd/similarity_oo.csv"), "--out", &d("gvd/oo.png")]));
    assert!(dir.path().join("gvd/oo.png").is_file());

    ok(&musa(&["export-codes", "--ckpt", &ckpt, "--manifest", &manifest, "--out", &d("codes")]));
    assert!(dir.path().join("codes/spk_b_4.codes").is_file());

    ok(&musa(&["plot", "embeddings", "--ckpt", &ckpt, "--manifest", &manifest, "--out", &d("emb.png")]));
    assert!(dir.path().join("emb.png").is_file());
}

#[test]
fn scenarios_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).display().to_string();
    let manifest = toy_manifest();
    let trials = dir.path().join("trials.tsv");
    let mut lines = String::new();
    for a in 0..5 {
        for b in 0..5 {
            if a != b {
                lines.push_str(&format!("spk_a_{a}\tspk_a_{b}\ttarget\nspk_a_{a}\tspk_b_{b}\tnontarget\n"));
            }
        }
    }
    std::fs::write(&trials, lines).unwrap();
    let t = trials.display().to_string();

    let out = musa(&["run-scenario", "--scenario", "ignorant", "--trials", &t, "--manifest", &manifest, "--out", &d("plain")]);
    ok(&out);
    let r = json(&dir.path().join("plain/results.json"));
    assert_eq!(r["scenario"], "ignorant");
    assert_eq!(r["num_target"], 20);
    assert!(dir.path().join("plain/scores.tsv").is_file());
    assert!(dir.path().join("plain/run.json").is_file());

    let out = musa(&["run-scenario", "--scenario", "lazy-informed", "--trials", &t, "--manifest", &manifest, "--out", &d("lazy")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("attacker"));
}

use std::path::Path;
use std::process::{Command, Output};

use kgcrit_core::simulator::ReportRecord;

fn kgcrit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgcrit"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kgcrit(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    kgcrit(dir, args).status.code().unwrap()
}

/// Synthetic data, a short training run and importance weights in a temp dir.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data"]);
    ok(d, &["train", "--data", "data", "--out", "emb.bin", "--epochs", "5", "--loss-log", "loss.csv"]);
    ok(d, &["weights", "--data", "data", "--emb", "emb.bin", "--out", "omega.bin"]);
    dir
}

fn read_jsonl(path: &Path) -> Vec<ReportRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const SIM: [&str; 7] = ["simulate", "--data", "data", "--emb", "emb.bin", "--omega", "omega.bin"];

#[test]
fn zero_epochs_writes_initial_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data", "--planted"]);
    let out = ok(d, &["train", "--data", "data", "--out", "e.bin", "--dim", "4", "--epochs", "0"]);
    assert!(out.contains("initial"));
    assert!(d.join("e.bin").metadata().unwrap().len() > 0);
    ok(d, &["eval", "--data", "data", "--emb", "e.bin"]);
}

#[test]
fn zero_rounds_report_base_metrics_only() {
    let dir = prepared();
    let d = dir.path();
    let mut args = SIM.to_vec();
    args.extend(["--rounds", "0", "--report", "r.jsonl"]);
    ok(d, &args);
    let recs = read_jsonl(&d.join("r.jsonl"));
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.step == Some(0)));
}

#[test]
fn eval_matches_simulation_round_zero() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["eval", "--data", "data", "--emb", "emb.bin", "--k", "5", "--report", "e.jsonl"]);
    let mut args = SIM.to_vec();
    args.extend(["--rounds", "2", "--report", "s.jsonl"]);
    ok(d, &args);
    let eval = read_jsonl(&d.join("e.jsonl"));
    let sim: Vec<ReportRecord> = read_jsonl(&d.join("s.jsonl")).into_iter().filter(|r| r.step == Some(0)).collect();
    assert_eq!(eval.len(), 3);
    for (e, s) in eval.iter().zip(&sim) {
        assert_eq!((&e.metric, e.score), (&s.metric, s.score));
    }
    let sim_rows = read_jsonl(&d.join("s.jsonl"));
    assert_eq!(sim_rows.iter().filter(|r| r.step.is_some()).count(), 3 * 3);
    assert_eq!(sim_rows.iter().filter(|r| r.metric.starts_with("maximp_")).count(), 3);
}

#[test]
fn every_artifact_is_reproducible() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["train", "--data", "data", "--out", "emb2.bin", "--epochs", "5", "--loss-log", "loss2.csv"]);
    ok(d, &["weights", "--data", "data", "--emb", "emb2.bin", "--out", "omega2.bin"]);
    ok(d, &["synth", "--out", "data2"]);
    let same = |a: &str, b: &str| std::fs::read(d.join(a)).unwrap() == std::fs::read(d.join(b)).unwrap();
    assert!(same("emb.bin", "emb2.bin"));
    assert!(same("loss.csv", "loss2.csv"));
    assert!(same("omega.bin", "omega2.bin"));
    for f in ["kg.txt", "items.txt", "interactions.txt", "keyphrase_labels.txt"] {
        assert!(same(&format!("data/{f}"), &format!("data2/{f}")), "{f}");
    }
    for report in ["a.csv", "b.csv"] {
        let mut args = vec!["sweep", "--data", "data", "--emb", "emb.bin", "--omega", "omega.bin"];
        args.extend(["--param", "M", "--values", "1,5", "--rounds", "2", "--seed", "4", "--report", report]);
        ok(d, &args);
    }
    assert!(same("a.csv", "b.csv"));
    let text = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(text.starts_with("arm,param,value,step,metric,score\n"));
    assert_eq!(text.lines().filter(|l| l.contains(",M,1.0,") && l.contains("ndcg@5") && !l.contains("maximp")).count(), 3);

    let mut other_seed = SIM.to_vec();
    other_seed.extend(["--rounds", "2", "--seed", "1", "--report", "s1.jsonl"]);
    ok(d, &other_seed);
    let mut again = SIM.to_vec();
    again.extend(["--rounds", "2", "--seed", "1", "--report", "s2.jsonl"]);
    ok(d, &again);
    assert!(same("s1.jsonl", "s2.jsonl"));
}

#[test]
fn distinct_exit_codes() {
    let dir = prepared();
    let d = dir.path();
    assert_eq!(code(d, &["eval", "--data", "data", "--emb", "emb.bin", "--frobnicate"]), 2);
    assert_eq!(code(d, &["nonsense"]), 2);
    assert_eq!(code(d, &[]), 2);
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["eval", "--data", "missing", "--emb", "emb.bin"]), 3);
    assert_eq!(code(d, &["eval", "--data", "data", "--emb", "missing.bin"]), 3);

    let mut bad_lr = SIM.to_vec();
    bad_lr.extend(["--lr", "-1"]);
    assert_eq!(code(d, &bad_lr), 4);
    let mut bad_arm = SIM.to_vec();
    bad_arm.extend(["--arm", "nope"]);
    assert_eq!(code(d, &bad_arm), 4);
    assert_eq!(code(d, &["sweep", "--data", "data", "--emb", "emb.bin", "--omega", "omega.bin", "--param", "M", "--values", "2.5"]), 4);
    // Weights where embeddings are expected: wrong header.
    assert_eq!(code(d, &["eval", "--data", "data", "--emb", "omega.bin"]), 5);
    std::fs::write(d.join("junk.bin"), "not an embedding file\n").unwrap();
    assert_eq!(code(d, &["eval", "--data", "data", "--emb", "junk.bin"]), 5);
    assert_eq!(code(d, &["train", "--data", "data", "--out", "x.bin", "--lr", "1e30", "--epochs", "3"]), 6);
}

#[test]
fn failures_print_one_diagnostic_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = kgcrit(dir.path(), &["eval", "--data", "missing", "--emb", "e.bin"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("kgcrit: "));
}

#[test]
fn flags_are_checked_before_loading() {
    let dir = tempfile::tempdir().unwrap();
    // Bad flag values win over the missing data directory.
    let args = ["simulate", "--data", "missing", "--emb", "e", "--omega", "w", "--samples", "0"];
    assert_eq!(code(dir.path(), &args), 4);
    let args = ["train", "--data", "missing", "--out", "e", "--dim", "0"];
    assert_eq!(code(dir.path(), &args), 4);
}

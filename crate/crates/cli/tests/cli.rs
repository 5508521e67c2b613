use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_banforge"));
    c.env_remove("BAN_FORGE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn blob_manifest(out: &str) -> Value {
    json!({
        "schema_version": 1,
        "name": "blobs",
        "seed": 7,
        "data": {"kind": "blobs", "classes": 3, "dim": 4, "noise": 0.8, "label_flip": 0.1,
                 "train": 90, "val": 30, "test": 30},
        "model": {"family": "MLP", "depth": 1, "width": 8},
        "train": {"epochs": 3, "batch_size": 15, "lr": 0.05},
        "generations": 2,
        "output_dir": out
    })
}

fn write_manifest(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_metrics_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_manifest(tmp.path(), "m.json", &blob_manifest("run"));
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gen0 = tmp.path().join("run/gen0");
    let metrics = std::fs::read_to_string(gen0.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(gen0.join("record.json").is_file() && gen0.join("checkpoint.banf").is_file());
    assert!(tmp.path().join("run/manifest.json").is_file());

    let again = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--force"])), 0);
    assert_eq!(std::fs::read_to_string(gen0.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = blob_manifest("run");
    m["data"] = json!({"kind": "chars", "path": "missing.txt", "steps": 10});
    m["model"] = json!({"family": "LSTM_LM", "depth": 1, "width": 8});
    let o = run(&["train", "--config", s(&write_manifest(tmp.path(), "a.json", &m))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));

    let mut m = blob_manifest("run");
    m["train"]["batch_size"] = json!("fifteen");
    let o = run(&["train", "--config", s(&write_manifest(tmp.path(), "b.json", &m))]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("train.batch_size") && err.contains("line"), "{err}");

    let mut m = blob_manifest("run");
    m["schema_version"] = json!(9);
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            s(&write_manifest(tmp.path(), "c.json", &m))
        ])),
        2
    );

    let mut m = blob_manifest("run");
    m["train"]["batch_size"] = json!(1000);
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            s(&write_manifest(tmp.path(), "d.json", &m))
        ])),
        2
    );

    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["train", "--config", s(&tmp.path().join("nope.json"))])), 4);
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn dry_run_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_manifest(tmp.path(), "m.json", &blob_manifest("run"));
    for cmd in ["train", "ban"] {
        let o = run(&[cmd, "--config", s(&cfg), "--dry-run"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("gen0"));
    }
    let o = run(&["verify", "--dry-run"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn ban_chain_summary_ensemble_and_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_manifest(tmp.path(), "m.json", &blob_manifest("run"));
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&["train", "--config", s(&cfg)])), 0);
    let teacher_ck = std::fs::read(out.join("gen0/checkpoint.banf")).unwrap();

    let o = run(&["ban", "--config", s(&cfg), "--generations", "2", "--objective", "kd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("reusing teacher"));
    assert_eq!(std::fs::read(out.join("gen0/checkpoint.banf")).unwrap(), teacher_ck);
    for k in 1..=2 {
        let rec: Value =
            serde_json::from_slice(&std::fs::read(out.join(format!("gen{k}/record.json"))).unwrap()).unwrap();
        assert_eq!(rec["teacher_generation"], k - 1);
        assert_eq!(rec["objective"], "kd");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 3);
    assert_eq!(code(&run(&["ban", "--config", s(&cfg), "--generations", "2"])), 2);

    // single member: the ensemble is that member
    let o = run(&["ensemble", s(&out), "--members", "gen1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("ensemble_report.json")).unwrap()).unwrap();
    assert_eq!(report["ensemble"]["test_metric"], report["members"][0]["test_metric"]);
    assert_eq!(report["ensemble"]["val_metric"], report["members"][0]["val_metric"]);

    let o = run(&["ensemble", "--config", s(&cfg), "--include-teacher"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("ensemble_report.json")).unwrap()).unwrap();
    let gens: Vec<u64> = report["members"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["generation"].as_u64().unwrap())
        .collect();
    assert_eq!(gens, vec![0, 1, 2]);
    assert_eq!(code(&run(&["ensemble", s(&out), "--members", ""])), 2);
    assert_eq!(code(&run(&["ensemble", s(&out), "--members", "gen7"])), 2);

    // a model against itself is a fixed point of distillation
    let o = run(&["diagnose", s(&out), "--teacher", "1", "--student", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d: Value =
        serde_json::from_slice(&std::fs::read(out.join("diagnostics/gen1_from_gen1_test.json")).unwrap()).unwrap();
    assert!(d["summary"]["mean_total_l1"].as_f64().unwrap() < 1e-12);

    let o = run(&["diagnose", s(&out), "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("diagnostics/gen1_from_gen0_val.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample_index,true_class,teacher_max,teacher_prob_true,gt_term,dark_term_l1,row_sum_check"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    for r in rows {
        let check: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!(check < 1e-12);
    }
}

#[test]
fn dkpp_and_cwtm_report_their_extras() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_manifest(tmp.path(), "m.json", &blob_manifest("run"));
    let out = tmp.path().join("run");
    let o = run(&["ban", "--config", s(&cfg), "--generations", "1", "--objective", "dkpp"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("generation,objective,seed,permutation_seed"));
    assert!(summary.lines().nth(2).unwrap().contains(",dkpp,8,7,"), "{summary}");

    let o = run(&[
        "ban",
        "--config",
        s(&cfg),
        "--generations",
        "1",
        "--objective",
        "cwtm",
        "--force",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("teacher-max weights"));
    let weights = std::fs::read_to_string(out.join("gen1/cwtm_weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 3);
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = blob_manifest("run");
    m["train"]["lr"] = json!(1e12);
    m["train"]["momentum"] = json!(0.0);
    m["model"]["depth"] = json!(2);
    let o = run(&["train", "--config", s(&write_manifest(tmp.path(), "m.json", &m))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(tmp.path().join("run/gen0/divergence.json").is_file());
}

#[test]
fn reruns_are_bit_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let cfg = write_manifest(tmp.path(), &format!("{name}.json"), &blob_manifest(name));
        let o = bin()
            .args(["ban", "--config", s(&cfg), "--objective", "dkpp"])
            .env("BAN_FORGE_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push(tmp.path().join(name));
    }
    for k in 0..=2 {
        for f in ["checkpoint.banf", "metrics.csv"] {
            let rel = format!("gen{k}/{f}");
            let first = std::fs::read(outputs[0].join(&rel)).unwrap();
            for o in &outputs[1..] {
                assert_eq!(std::fs::read(o.join(&rel)).unwrap(), first, "{rel}");
            }
        }
    }
    assert_eq!(
        std::fs::read(outputs[0].join("summary.csv")).unwrap(),
        std::fs::read(outputs[2].join("summary.csv")).unwrap()
    );
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = bin()
        .args(["verify", "--instances", "1"])
        .env("BAN_FORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("BAN_FORGE_THREADS"));
}

#[test]
fn verify_passes() {
    let o = run(&["verify", "--instances", "20", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 9);
}

#[test]
fn char_corpus_chain_reports_perplexity() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = (0..400).map(|i| ["abc ", "abd ", "bca\n"][i % 3]).collect();
    std::fs::write(tmp.path().join("corpus.txt"), text).unwrap();
    let m = json!({
        "schema_version": 1,
        "name": "chars",
        "seed": 1,
        "data": {"kind": "chars", "path": "corpus.txt", "steps": 12},
        "model": {"family": "LSTM_LM", "depth": 1, "width": 12},
        "train": {"epochs": 1, "batch_size": 8, "lr": 0.5,
                  "schedule": {"kind": "adaptive", "factor": 0.25, "min_delta": 0.0}, "max_grad_norm": 5.0},
        "objective": {"kind": "kd+l"},
        "output_dir": "lm"
    });
    let cfg = write_manifest(tmp.path(), "m.json", &m);
    let o = run(&["ban", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(tmp.path().join("lm/summary.csv")).unwrap();
    assert!(summary.contains("perplexity") && summary.contains("kd+l"), "{summary}");
}

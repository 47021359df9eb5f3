use std::path::Path;
use std::process::Command;

use pdpnet::bench::{read_rows, TestSet};
use pdpnet::instances::Distribution;

fn pdpnet(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_pdpnet")).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_oracle_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set.json");
    let oracle = dir.path().join("oracle.csv");
    pdpnet(&["gen", "--n", "3", "--dist", "uniform", "--count", "6", "--seed", "4", "--out", s(&set)]);
    assert_eq!(TestSet::read(&set).unwrap(), TestSet::generate(3, Distribution::Uniform, 6, 4).unwrap());

    pdpnet(&["oracle", "--testset", s(&set), "--out", s(&oracle)]);
    let rows = read_rows(&oracle).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.gap_pct == Some(0.0) && r.decode == "exact"));

    let md = pdpnet(&["report", "--in", s(&oracle), "--format", "md"]);
    assert!(md.contains("| exact_dp | 3 | uniform | exact | 6 |"));
    let csv = pdpnet(&["report", "--in", s(&oracle), s(&oracle), "--format", "csv"]);
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn train_then_eval_with_reference() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"epochs": 1, "batches_per_epoch": 2, "batch_size": 4, "n": 3, "validation_size": 4,
            "encoder": {"d_h": 16, "layers": 1, "heads": 2, "ffn_hidden": 32}, "decoder": {"gate_hidden": 16}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    pdpnet(&["train", "--config", s(&config), "--out", s(&run)]);
    for f in ["final.ckpt", "metrics.csv", "epochs.csv", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let set = dir.path().join("set.json");
    let oracle = dir.path().join("oracle.csv");
    let greedy = dir.path().join("greedy.csv");
    let sampled = dir.path().join("sampled.csv");
    let ckpt = run.join("final.ckpt");
    pdpnet(&["gen", "--n", "3", "--count", "5", "--out", s(&set)]);
    pdpnet(&["oracle", "--testset", s(&set), "--out", s(&oracle)]);
    pdpnet(&["eval", "--ckpt", s(&ckpt), "--testset", s(&set), "--reference", s(&oracle), "--out", s(&greedy)]);
    pdpnet(&[
        "eval", "--ckpt", s(&ckpt), "--testset", s(&set), "--decode", "sample", "--samples", "32", "--ablation", "pomo",
        "--out", s(&sampled),
    ]);
    let exact = read_rows(&oracle).unwrap();
    for r in read_rows(&greedy).unwrap() {
        assert!(r.obj >= exact[r.instance_id].obj - 1e-9);
        assert!(r.gap_pct.unwrap() >= 0.0);
    }
    let rows = read_rows(&sampled).unwrap();
    assert!(rows.iter().all(|r| r.method == "pomo" && r.decode == "sample32" && r.gap_pct.is_none()));
}

#[test]
fn bad_input_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_pdpnet"))
        .args(["oracle", "--testset", "/nonexistent/set.json", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn vitscale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitscale"))
        .args(args)
        .current_dir(dir)
        .env_remove("VTSK_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vitscale(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend_from_slice(args);
    serde_json::from_str(&ok(dir, &all)).expect("stdout is pure JSON")
}

#[test]
fn giant_cost_matches_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(
        dir.path(),
        &[
            "cost", "--width", "1664", "--depth", "48", "--mlp", "8192", "--heads", "16", "--patch", "14", "--res",
            "224",
        ],
    );
    let params = r["body_params"].as_f64().unwrap() / 1e6;
    let gflops = r["flops"].as_f64().unwrap() / 1e9;
    assert!((params / 1843.0 - 1.0).abs() < 0.01, "{params}");
    assert!((gflops / 965.0 - 1.0).abs() < 0.03, "{gflops}");
    assert_eq!(r["memory"].as_object().unwrap().len(), 3);
    assert_eq!(r["memory"]["adafactor-mod"]["fits"], true);
    assert_eq!(r["memory"]["adam"]["fits"], false);
}

#[test]
fn schedule_peaks_at_the_end_of_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(
        dir.path(),
        &[
            "schedule",
            "--base",
            "8e-4",
            "--warmup",
            "10000",
            "--decay",
            "rsqrt",
            "--timescale",
            "10000",
            "--total",
            "100000",
            "--cooldown",
            "50000",
        ],
    );
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,lr"));
    let rows: Vec<(u64, f64)> = lines
        .map(|l| {
            let (s, v) = l.split_once(',').unwrap();
            (s.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 100_001);
    assert_eq!(rows[10_000], (10_000, 8e-4));
    assert_eq!(rows[100_000].1, 0.0);

    let pts = json(dir.path(), &["schedule", "--base", "1e-3", "--decay", "constant", "--last", "10", "--every", "5"]);
    assert_eq!(pts.as_array().unwrap().len(), 3);
    assert_eq!(pts[2]["lr"], 1e-3);
}

#[test]
fn fit_law_on_bundled_runs() {
    let dir = tempfile::tempdir().unwrap();
    let runs = repo("runs/fewshot.csv");
    let shapes = repo("tables/table2.csv");
    let args = [
        "fit-law",
        "--runs",
        runs.to_str().unwrap(),
        "--metric",
        "INet10",
        "--shapes",
        shapes.to_str().unwrap(),
        "--plot",
        "curve.svg",
    ];
    let printed = json(dir.path(), &args);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(printed, written);
    assert!(written["params"]["c"].as_f64().unwrap() > 0.0);
    assert!(!written["frontier"].as_array().unwrap().is_empty());
    for key in ["a", "b", "c", "d"] {
        assert!(written["params"][key].is_number());
    }
    assert!(std::fs::read_to_string(dir.path().join("curve.svg")).unwrap().starts_with("<svg"));

    let missing = vitscale(
        dir.path(),
        &["fit-law", "--runs", runs.to_str().unwrap(), "--metric", "nope", "--shapes", shapes.to_str().unwrap()],
    );
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn shapefind_lists_every_valid_combination() {
    let dir = tempfile::tempdir().unwrap();
    let rows = json(
        dir.path(),
        &["shapefind", "--widths", "384,768", "--depths", "6,12", "--heads", "6,8", "--mlps", "1536,3072"],
    );
    assert_eq!(rows.as_array().unwrap().len(), 16);
    assert!(ok(dir.path(), &["shapefind", "--widths", "384", "--depths", "6", "--heads", "6", "--mlps", "1536"])
        .contains("depth"));
}

#[test]
fn quickstart_is_deterministic() {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let t = json(d, &["train", "--steps", "120", "--seed", "0"]);
        assert_eq!(t["steps_run"], 120);
        assert!(d.join("model.vtsk").exists() && d.join("train_log.csv").exists());
        let f = json(d, &["features", "--checkpoint", "model.vtsk", "--data-seed", "1"]);
        assert_eq!(f["dim"], 32);
        let p = json(d, &["probe", "--features", "features.vtsf", "--shots", "5", "--repeats", "3"]);
        assert!(p["accuracy"].as_f64().unwrap() > 0.5, "{p}");
        runs.push((std::fs::read(d.join("model.vtsk")).unwrap(), std::fs::read(d.join("features.vtsf")).unwrap(), p));
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn train_accepts_a_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "model": {"width": 16, "depth": 1, "mlp_width": 32, "heads": 2, "patch_size": 4,
                  "image_res": 8, "num_classes": 3, "head_type": "map"},
        "optimizer": "adam",
        "lr": 1e-3,
        "wd": 1e-5,
        "schedule": {"decay_type": "linear", "warmup_steps": 2},
        "total_steps": 6,
        "batch_size": 4,
        "polyak_decay": 0.9
    });
    std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();
    let t = json(dir.path(), &["train", "--config", "cfg.json", "--n-per-class", "4"]);
    assert_eq!(t["steps_run"], 6);
    assert_eq!(t["polyak"], true);

    std::fs::write(dir.path().join("bad.json"), "{\"model\": 3}").unwrap();
    assert_eq!(vitscale(dir.path(), &["train", "--config", "bad.json"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(vitscale(d, &["bogus"]).status.code(), Some(1));
    assert_eq!(vitscale(d, &["schedule", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(vitscale(d, &[]).status.code(), Some(1));
    assert_eq!(vitscale(d, &["schedule", "--base", "1e-3", "--decay", "constant"]).status.code(), Some(1));
    assert_eq!(vitscale(d, &["probe", "--features", "missing.vtsf"]).status.code(), Some(2));
    assert_eq!(vitscale(d, &["--help"]).status.code(), Some(0));

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_vitscale"))
        .args(["schedule", "--base", "1e-3", "--total", "2"])
        .env("VTSK_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
    let one_thread = Command::new(env!("CARGO_BIN_EXE_vitscale"))
        .args(["schedule", "--base", "1e-3", "--total", "2"])
        .env("VTSK_THREADS", "1")
        .output()
        .unwrap();
    assert!(one_thread.status.success());
}

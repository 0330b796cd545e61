use std::path::Path;
use std::process::{Command, Output};

use mpcx::harness::BenchRow;

fn mpcx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpcx")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn gen(dir: &Path, name: &str, count: usize, seed: u64) -> String {
    let path = dir.join(name);
    let p = path.to_str().unwrap();
    let out = mpcx(&["gen", "--scenario", "double-integrator", "--count", &count.to_string(), "--out", p, "--seed", &seed.to_string(), "--horizon", "6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    p.to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("x.jsonl");
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&mpcx(&[])), 2);
    assert_eq!(code(&mpcx(&["gen", "--scenario", "double-integrator", "--count", "0", "--out", out_path.to_str().unwrap()])), 2);
    assert_eq!(code(&mpcx(&["gen", "--scenario", "unicycle", "--count", "3", "--out", out])), 2);
    assert_eq!(code(&mpcx(&["train", "--data", "/nonexistent/data.jsonl", "--out", out])), 2);
    assert_eq!(code(&mpcx(&["verify", "--data", "/nonexistent/data.jsonl", "--oracle"])), 2);
    assert_eq!(code(&mpcx(&["bench", "--scenario", "double-integrator", "--count", "5"])), 2);
    assert!(!out_path.exists());
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", 12, 3);
    let b = gen(dir.path(), "b.jsonl", 12, 3);
    let c = gen(dir.path(), "c.jsonl", 12, 4);
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(String::from_utf8(read(&a)).unwrap().lines().count(), 13);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "gen": {"count": 7, "horizon": 6, "scenario": "double-integrator"}}"#).unwrap();
    let from_cfg = dir.path().join("cfg.jsonl");
    let out = mpcx(&["--config", cfg.to_str().unwrap(), "gen", "--out", from_cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plain = gen(dir.path(), "plain.jsonl", 7, 3);
    assert_eq!(std::fs::read(&from_cfg).unwrap(), std::fs::read(plain).unwrap());

    let overridden = dir.path().join("over.jsonl");
    let out = mpcx(&["--config", cfg.to_str().unwrap(), "gen", "--out", overridden.to_str().unwrap(), "--count", "4"]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(&overridden).unwrap().lines().count(), 5);

    std::fs::write(&cfg, r#"{"gen": {"epochs": 3}}"#).unwrap();
    let out = mpcx(&["--config", cfg.to_str().unwrap(), "gen", "--scenario", "double-integrator", "--count", "2", "--out", overridden.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_verification_never_falls_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", 20, 1);
    let out = mpcx(&["verify", "--data", &data, "--oracle"]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    assert_eq!(report["alpha"], 1.0);
    assert_eq!(report["fallbacks"], 0);
    assert_eq!(report["all_verified"], true);
}

#[test]
fn train_then_verify_and_reject_corrupt_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", 30, 2);
    let model = dir.path().join("m.json");
    let m = model.to_str().unwrap();
    let out = mpcx(&["train", "--data", &data, "--arch", "mlp", "--out", m, "--epochs", "2", "--mlp-hidden", "8"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("m.json.report.json").exists());

    let out = mpcx(&["verify", "--data", &data, "--model", m, "--test-split"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout_json(&out)["records"], 6);

    let text = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&model, &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&mpcx(&["verify", "--data", &data, "--model", m])), 1);
}

#[test]
fn bench_csv_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let csv_path = dir.path().join("r.csv");
    let out = mpcx(&[
        "bench", "--scenario", "double-integrator", "--count", "30", "--repeats", "1", "--horizon", "8",
        "--out-json", json.to_str().unwrap(), "--out-csv", csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let json_rows: Vec<BenchRow> = serde_json::from_value(report["rows"].clone()).unwrap();
    let csv_rows: Vec<BenchRow> = csv::Reader::from_path(&csv_path).unwrap().deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(json_rows, csv_rows);
    assert_eq!(json_rows.iter().map(|r| r.config_name.as_str()).collect::<Vec<_>>(), ["oracle", "all-inactive"]);
    assert!(report["environment"]["clock_resolution"].as_f64().unwrap() > 0.0);
}

#[test]
fn smooth_demo_reports_bounds() {
    let out = mpcx(&["smooth-demo", "--members", "8", "--points", "200", "--beta", "5", "50"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["containment_failures"], 0);
        assert_eq!(r["sandwich_failures"], 0);
        assert!(r["max_observed_gap"].as_f64().unwrap() <= r["bound_gap"].as_f64().unwrap() + 1e-9);
    }
}

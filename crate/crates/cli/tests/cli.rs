use std::path::Path;
use std::process::{Command, Output};

fn fhrctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhrctl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn argument_and_config_errors_exit_2() {
    assert_eq!(code(&fhrctl(&["simulate", "--bogus"])), 2);
    assert_eq!(code(&fhrctl(&["launch"])), 2);
    assert_eq!(code(&fhrctl(&["simulate", "--config", "/nonexistent/cfg.json"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.json", serde_json::json!({"durration": 10.0}));
    let o = fhrctl(&["simulate", "--config", &typo, "--no-governor"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("durration"));
    let bad_dt = write_config(dir.path(), "dt.json", serde_json::json!({"duration": 10.0, "dt": 0.3}));
    assert_eq!(code(&fhrctl(&["simulate", "--config", &bad_dt, "--no-governor"])), 2);
    let empty = tempfile::tempdir().unwrap();
    let o = fhrctl(&["fit", "--data", empty.path().to_str().unwrap(), "--out", "/tmp/never.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unstable_tuning_grid_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", serde_json::json!({"duration": 200.0}));
    let o = fhrctl(&["tune", "--config", &cfg, "--loop", "core-inlet", "--kp=-5000", "--ki=-500"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn baseline_simulation_writes_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", serde_json::json!({"duration": 60.0}));
    let out = dir.path().join("run");
    let o = fhrctl(&["simulate", "--config", &cfg, "--no-governor", "--noise", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["ticks"], 300);
    let csv = std::fs::read_to_string(out.join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 301);
    assert!(csv.starts_with("t,"));
    assert!(out.join("summary.json").exists());
}

#[test]
fn gen_data_fit_then_governed_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.json");
    let o = fhrctl(&["gen-data", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(data.join("train")).unwrap().count(), 22);

    let o = fhrctl(&["fit", "--data", data.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["spectral_radius"].as_f64().unwrap() < 1.0);
    for (_, r2) in report["validation_r2"].as_object().unwrap() {
        assert!(r2.as_f64().unwrap() > 0.95);
    }

    let cfg = write_config(dir.path(), "c.json", serde_json::json!({"duration": 800.0}));
    let o = fhrctl(&["simulate", "--config", &cfg, "--model", model.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["first_intervention_t"].as_f64().is_some());
    assert_eq!(summary["violations"], 0);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn run(dir: &Path, config: &str, extra: &[&str]) -> (i32, String) {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_layer-handle"))
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("runs"))
        .args(extra)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap())
}

/// Report path printed on stdout after the status word.
fn report_path(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.split_whitespace().nth(1).expect("report path on stdout"))
}

fn report(stdout: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(report_path(stdout)).unwrap()).unwrap()
}

#[test]
fn join_path_mode_writes_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stdout) = run(tmp.path(), r#"{"mode": "join-path", "params": {"x0": 1, "y0": 2}}"#, &[]);
    assert_eq!(code, 0);
    let r = report(&stdout);
    assert_eq!(r["status"], "pass");
    assert_eq!(r["results"]["edge_count"], 3);
    assert_eq!(r["results"]["path"]["vertices"].as_array().unwrap().len(), 4);
}

#[test]
fn layer_mode_exports_and_reports_a_horizontal_period() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"mode": "layer", "params": {"x0": 0.5, "y0": 1.5}, "mesh": {"h": 0.05}}"#;
    let (code, stdout) = run(tmp.path(), cfg, &[]);
    assert_eq!(code, 0, "{stdout}");
    let r = report(&stdout);
    let dir = report_path(&stdout).parent().unwrap().to_path_buf();
    for file in ["surface.obj", "surface.ply", "mesh.json", "field.json"] {
        assert!(dir.join(file).is_file(), "{file}");
    }
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("layer-"));
    let p = r["results"]["pseudo_period_vector"].as_array().unwrap();
    assert!(p[2].as_f64().unwrap().abs() <= 1e-10);
    assert!(r["results"]["pseudo_period"].as_f64().unwrap() > 1.9);
    assert_eq!(r["config"]["mesh"]["h"], 0.05);
    assert_eq!(r["config"]["solver"]["tolerance"], 1e-10);
    assert_eq!(r["hashes"]["mesh"].as_str().unwrap().len(), 64);
    assert_eq!(r["hashes"]["field"].as_str().unwrap().len(), 64);
}

#[test]
fn identical_configs_give_bit_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"mode": "handle", "mesh": {"h": 0.1, "half_width": 4}}"#;
    let (code, stdout) = run(tmp.path(), cfg, &["--seed", "7"]);
    assert_eq!(code, 0);
    let path = report_path(&stdout);
    let first = fs::read(&path).unwrap();
    fs::remove_dir_all(path.parent().unwrap()).unwrap();
    let (_, again) = run(tmp.path(), cfg, &["--seed", "7"]);
    assert_eq!(report_path(&again), path);
    assert_eq!(fs::read(&path).unwrap(), first);
    let r = report(&again);
    assert_eq!(r["config"]["seed"], 7);
    assert_eq!(r["results"]["label"], "minus");
}

#[test]
fn handle_mode_reports_vanishing_periods_and_gamma_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, stdout) = run(tmp.path(), r#"{"mode": "handle", "mesh": {"h": 0.1, "half_width": 4}}"#, &[]);
    assert_eq!(code, 0);
    let r = report(&stdout);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for expected in ["puncture-period", "s-symmetry", "half-period", "gamma-turning", "intersections", "sides-separated"] {
        assert!(names.contains(&expected), "{expected} in {names:?}");
    }
    assert!(r["hashes"]["layer_field"].is_string());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _) = run(tmp.path(), r#"{"mode": "layer", "mesh": {"hh": 0.1}}"#, &[]);
    assert_eq!(code, 2);
    let (code, _) = run(tmp.path(), r#"{"mode": "layer"}"#, &["--refine", "9"]);
    assert_eq!(code, 2);
    let (code, stdout) = run(tmp.path(), r#"{"mode": "handle", "params": {"x0": 0, "y0": 1}}"#, &[]);
    assert_eq!(code, 2);
    let r = report(&stdout);
    assert_eq!(r["status"], "error");
    assert!(r["error"].as_str().unwrap().contains("inadmissible"));
}

#[test]
fn verify_accepts_a_stored_run_and_rejects_a_tampered_one() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, stdout) = run(tmp.path(), r#"{"mode": "layer", "params": {"x0": 1, "y0": 1}}"#, &[]);
    let dir = report_path(&stdout).parent().unwrap().to_path_buf();
    let verify = |target: &Path| format!(r#"{{"mode": "verify", "verify": {{"run": {}}}}}"#, Value::from(target.to_str().unwrap()));
    let (code, _) = run(tmp.path(), &verify(&dir), &[]);
    assert_eq!(code, 0);

    let tampered = tmp.path().join("tampered");
    fs::create_dir(&tampered).unwrap();
    for entry in fs::read_dir(&dir).unwrap() {
        let entry = entry.unwrap();
        fs::copy(entry.path(), tampered.join(entry.file_name())).unwrap();
    }
    let field_path = tampered.join("field.json");
    let mut field: Value = serde_json::from_str(&fs::read_to_string(&field_path).unwrap()).unwrap();
    let v = field["values"][3].as_f64().unwrap();
    field["values"][3] = Value::from(v + 1e-9);
    fs::write(&field_path, field.to_string()).unwrap();
    let (code, stdout) = run(tmp.path(), &verify(&tampered), &[]);
    assert_eq!(code, 1);
    let failed: Vec<String> = report(&stdout)["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["pass"] == false)
        .map(|c| c["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failed, ["snapshot-field"]);
}

#[test]
fn sweep_writes_one_directory_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"mode": "sweep", "mesh": {"h": 0.1}, "sweep": {"x0": [0.0, 0.5], "y0": [1.5, 2.0, 0.5]}}"#;
    let (code, stdout) = run(tmp.path(), cfg, &[]);
    // y0 = 0.5 violates x0^2 + y0^2 > 1 for both x0, so two points error
    assert_eq!(code, 1);
    let r = report(&stdout);
    let points = r["results"]["points"].as_array().unwrap();
    assert_eq!(points.len(), 6);
    assert_eq!(points.iter().filter(|p| p["status"] == "error").count(), 2);
    let dir = report_path(&stdout).parent().unwrap().to_path_buf();
    for p in points {
        assert!(dir.join(p["dir"].as_str().unwrap()).join("report.json").is_file());
    }
    assert!(r["results"]["max_neighbour_jump"].as_f64().unwrap() < 0.5);
}

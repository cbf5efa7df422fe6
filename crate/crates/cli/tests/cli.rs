use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn limval(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_limval"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].parse().unwrap()).collect()
}

#[test]
fn ex5_values_stay_above_the_lower_bound() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["value", "--example", "ex5", "--T", "100"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = column(&d.path().join("values.csv"), "value");
    assert!(!v.is_empty());
    assert!(v.iter().all(|&x| x >= 0.45), "{v:?}");
    let m = json(&d.path().join("manifest.json"));
    assert_eq!(m["command"], "value");
    assert_eq!(m["exit_code"], 0);
    assert!(m["wall_time_s"].as_f64().unwrap() > 0.0);
    assert_eq!(m["config"]["horizon"], 100.0);
}

#[test]
fn contraction_passes_the_scalar_check() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["check", "--example", "ex3", "--condition", "scalar"], d.path());
    assert_eq!(o.status.code(), Some(0));
    let r = json(&d.path().join("check.json"));
    assert!(r["max_violation"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["passed"], true);
}

#[test]
fn double_integrator_is_refuted_with_a_witness() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["check", "--example", "ex5", "--condition", "scalar", "--reach-m", "0"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(d.path().join("witness.csv").exists());
    assert_eq!(json(&d.path().join("manifest.json"))["exit_code"], 2);
}

#[test]
fn ex5_synthesis_fails_structurally() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["synth", "--example", "ex5", "--alpha", "0.1"], d.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let c = json(&d.path().join("certificate.json"));
    assert_eq!(c["verdict"]["verdict"], "failed");
    assert_eq!(c["verdict"]["diagnosis"], "structural");
    // no stage was accepted, so the gamma table has only its header
    let g = std::fs::read_to_string(d.path().join("gamma.csv")).unwrap();
    assert_eq!(g.lines().next(), Some("T,gamma,bound"));
    assert!(c["long_run"]["min_gamma"].as_f64().unwrap() >= 0.9);
}

#[test]
fn echoed_config_reproduces_outputs() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    let args = ["aux", "--example", "ex4", "--cells", "20,20", "--step", "0.1", "--t-grid", "1,2,5", "--m-grid", "0,1,2"];
    assert_eq!(limval(&args, &a).status.code(), Some(0));
    let cfg = a.join("config.json");
    let o = limval(&["aux", "--config", cfg.to_str().unwrap(), "--threads", "2"], &b);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(a.join("aux.csv")).unwrap(), std::fs::read(b.join("aux.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("diagnostics.txt")).unwrap(),
        std::fs::read(b.join("diagnostics.txt")).unwrap()
    );
}

#[test]
fn exported_problem_gives_the_same_values() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(limval(&["export-example", "--example", "ex4"], d.path()).status.code(), Some(0));
    let file = d.path().join("ex4.json");
    assert!(d.path().join("ex4_spec.json").exists());
    let grid = ["--cells", "16,16", "--step", "0.1", "--T", "5"];
    let a = d.path().join("a");
    let b = d.path().join("b");
    let mut args = vec!["value", "--example", "ex4"];
    args.extend(grid);
    assert_eq!(limval(&args, &a).status.code(), Some(0));
    let mut args = vec!["value", "--problem", file.to_str().unwrap()];
    args.extend(grid);
    assert_eq!(limval(&args, &b).status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("values.csv")).unwrap(), std::fs::read(b.join("values.csv")).unwrap());
}

#[test]
fn shadow_follows_the_contraction() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["shadow", "--example", "ex3", "--y1", "1.5", "--y2", "-1", "--T", "3"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let delta = column(&d.path().join("shadow_trace.csv"), "delta");
    assert!(delta.last().unwrap() < &delta[0]);
}

#[test]
fn validate_and_report() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(limval(&["validate", "--example", "ex4"], d.path()).status.code(), Some(0));
    assert!(d.path().join("validation.json").exists());
    let r = d.path().join("r");
    let o = limval(&["report", "--example", "ex3", "--cells", "100", "--t-grid", "1,2,4,8", "--m-grid", "0,1,2"], &r);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = json(&r.join("report.json"));
    assert!(rep["flags"].as_array().unwrap().iter().all(|f| f["declared"] == f["observed"]));
}

#[test]
fn operational_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let o = limval(&["value", "--example", "ex9"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ex9"));
    let o = limval(&["value"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let o = limval(&["value", "--problem", "/nonexistent.json"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let o = limval(&["check", "--example", "ex3", "--condition", "bogus"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let o = limval(&["value", "--example", "ex3", "--no-such-flag"], d.path());
    assert_eq!(o.status.code(), Some(1));
    let bad = d.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = limval(&["value", "--example", "ex3", "--config", bad.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(1));
}

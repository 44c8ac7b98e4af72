use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const EXAMPLE1: &str = r#"{"n_supply":2,"n_demand":2,"edges":[[0,0],[0,1],[1,1]],"phi":[[0.375,0.125],[0.25,0.25]]}"#;
const VIOLATING: &str = r#"{"n_supply":2,"n_demand":2,"edges":[[0,0],[0,1],[1,1]],"phi":[[0.125,0.375],[0.25,0.25]]}"#;
const FULL_FLEX: &str = r#"{"n_supply":2,"n_demand":2,"edges":[[0,0],[0,1],[1,0],[1,1]],"phi":[[0.375,0.125],[0.25,0.25]]}"#;

fn smw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smw")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rows(csv: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(csv.as_bytes()).records().map(Result::unwrap).collect()
}

#[test]
fn validate_example1() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "ex1.json", EXAMPLE1);
    let out = smw(&["validate", s(&net)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((report["hall_gap"].as_f64().unwrap() - 0.125).abs() < 1e-12);
    assert_eq!(report["crp_holds"], serde_json::Value::Bool(true));
}

#[test]
fn validate_crp_violation_exits_2() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "viol.json", VIOLATING);
    let out = smw(&["validate", s(&net)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[0]"));
}

#[test]
fn malformed_json_exits_1() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "bad.json", "{\"n_supply\": 2,\n");
    let out = smw(&["validate", s(&net)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn gamma_uniform_and_optimal() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "ex1.json", EXAMPLE1);
    let value = |args: &[&str]| {
        let out = smw(args);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        let g = rows(&text).into_iter().find(|r| &r[0] == "gamma").unwrap();
        (g[7].parse::<f64>().unwrap(), text)
    };
    let (uniform, _) = value(&["gamma", s(&net)]);
    assert!((uniform - 0.5 * 2f64.ln()).abs() < 1e-9);
    let (opt, text) = value(&["gamma", s(&net), "--optimal"]);
    assert!(opt > 0.69 && opt <= 2f64.ln() + 1e-12);
    assert!(text.contains("drain_time"));
    let (given, _) = value(&["gamma", s(&net), "--alpha", "0.9,0.1"]);
    assert!((given - 0.9 * 2f64.ln()).abs() < 1e-9);
}

#[test]
fn gamma_full_flexibility_is_infinite() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "full.json", FULL_FLEX);
    let out = smw(&["gamma", s(&net)]);
    assert_eq!(out.status.code(), Some(0));
    let g = rows(&stdout(&out)).into_iter().find(|r| &r[0] == "gamma").unwrap();
    assert_eq!(&g[7], "inf");
}

#[test]
fn generate_is_deterministic() {
    let a = smw(&["generate", "random-crp", "--n", "5", "--seed", "11"]);
    let b = smw(&["generate", "random-crp", "--n", "5", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let c = smw(&["generate", "random-crp", "--n", "5", "--seed", "12"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn sweep_single_cell_five_seeds() {
    let dir = TempDir::new().unwrap();
    write(&dir, "ex1.json", EXAMPLE1);
    let cfg = write(
        &dir,
        "sweep.json",
        r#"{"network": "ex1.json", "policies": ["smw-uniform"], "k": [5], "seeds": [1,2,3,4,5], "steps": 20000}"#,
    );
    let out = smw(&["sweep", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let rs = rows(&stdout(&out));
    let runs: Vec<_> = rs.iter().filter(|r| &r[0] == "run").collect();
    let agg: Vec<_> = rs.iter().filter(|r| &r[0] == "aggregate").collect();
    assert_eq!(runs.len(), 5);
    assert_eq!(agg.len(), 1);
    let mean = runs.iter().map(|r| r[7].parse::<f64>().unwrap()).sum::<f64>() / 5.0;
    let pooled: f64 = agg[0][7].parse().unwrap();
    assert!(pooled > 0.0 && (pooled - mean).abs() < 0.02);
}

#[test]
fn sweep_exact_fits_separate_fluid_from_vanilla() {
    let dir = TempDir::new().unwrap();
    write(&dir, "ex1.json", EXAMPLE1);
    let cfg = write(
        &dir,
        "sweep.json",
        r#"{"network": "ex1.json", "policies": ["smw-optimal", "vanilla", "fluid"],
            "k": [10,20,30,40,50,60], "seeds": [1], "steps": 5000, "exact": true}"#,
    );
    let out = smw(&["sweep", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let rs = rows(&stdout(&out));
    let slope = |policy: &str| -> f64 {
        rs.iter().find(|r| &r[0] == "fit_exact" && &r[1] == policy).unwrap()[9].parse().unwrap()
    };
    assert!(slope("fluid") < 0.25 * slope("vanilla"));
    assert!(slope("smw-optimal") > slope("vanilla"));
    assert_eq!(rs.iter().filter(|r| &r[0] == "exact").count(), 18);
}

#[test]
fn transient_zero_horizon_is_undefined() {
    let dir = TempDir::new().unwrap();
    write(&dir, "ex1.json", EXAMPLE1);
    let cfg = write(
        &dir,
        "tr.json",
        r#"{"network": "ex1.json", "policies": ["vanilla"], "k": 10, "initial_states": [[10,0]], "horizons": [0], "seeds": [1]}"#,
    );
    let out = smw(&["transient", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let rs = rows(&stdout(&out));
    assert_eq!(rs.len(), 1);
    assert_eq!(&rs[0][6], "0");
    assert_eq!(&rs[0][8], "");
}

#[test]
fn transient_is_reproducible() {
    let dir = TempDir::new().unwrap();
    write(&dir, "ex1.json", EXAMPLE1);
    let cfg = write(
        &dir,
        "tr.json",
        r#"{"network": "ex1.json", "policies": ["smw-uniform"], "k": 8, "initial_states": {"sample": 3},
            "horizons": [50, 500], "seeds": [4], "replications": 3}"#,
    );
    let a = smw(&["transient", s(&cfg), "--seed", "9"]);
    let b = smw(&["transient", s(&cfg), "--seed", "9"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(rows(&stdout(&a)).len(), 6);
}

#[test]
fn fleet_reports_requirement() {
    let out = smw(&["generate", "synthetic-city", "--seed", "3"]);
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "city.json", &stdout(&out));
    let out = smw(&["fleet", s(&net), "--rate", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let total = v["k_in_transit"].as_f64().unwrap() + v["k_pickup"].as_f64().unwrap();
    assert_eq!(v["k_fl"].as_u64().unwrap(), total.ceil() as u64);
}

#[test]
fn exact_curve_for_example1() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "ex1.json", EXAMPLE1);
    let csv_path = dir.path().join("curve.csv");
    let out = smw(&["exact", s(&net), "--policy", "vanilla", "--k", "1,5", "--out", s(&csv_path)]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(csv_path).unwrap();
    let rs = rows(&text);
    assert_eq!(rs.len(), 2);
    assert!((rs[0][1].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn tune_writes_summary_and_trace() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "ex1.json", EXAMPLE1);
    let cfg = write(&dir, "tune.json", r#"{"budget": 60, "population": 20, "steps": 5000}"#);
    let trace = dir.path().join("trace.csv");
    let out = smw(&["tune", s(&net), "--config", s(&cfg), "--trace", s(&trace)]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let alpha: Vec<f64> = serde_json::from_value(v["alpha"].clone()).unwrap();
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(rows(&fs::read_to_string(trace).unwrap()).len(), 60);
}

#[test]
fn unknown_policy_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let net = write(&dir, "ex1.json", EXAMPLE1);
    let out = smw(&["exact", s(&net), "--policy", "random", "--k", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

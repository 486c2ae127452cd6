use std::path::Path;
use std::process::{Command, Output};

use floz_core::flow::FlowModel;
use serde_json::Value;

fn floz(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floz"))
        .args(args)
        .current_dir(dir)
        .env("FLOZ_THREADS", "1")
        .output()
        .expect("floz runs")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const GAUSSIAN_SPEC: &str = r#"{
  "family": "gaussian", "d": 2,
  "mean": [3.0, -1.0], "cov": [[2.0, 0.4], [0.4, 1.0]],
  "prior": {"lower": [-20, -20], "upper": [20, 20]},
  "n_samples": 1000, "seed": 5
}"#;

fn generate(dir: &Path) {
    std::fs::write(dir.join("spec.json"), GAUSSIAN_SPEC).unwrap();
    let out = floz(&["generate", "spec.json", "--out", "g"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_samples_metadata_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path());
    let csv = std::fs::read_to_string(dir.path().join("g.samples.csv")).unwrap();
    assert!(csv.starts_with("x0,x1,log_unnorm_posterior\n"));
    assert_eq!(csv.lines().count(), 1001);
    let meta = read_json(&dir.path().join("g.meta.json"));
    assert_eq!(meta["dim"], 2);
    let truth = read_json(&dir.path().join("g.truth.json"));
    assert_eq!(truth["method"], "closed_form");
    // 2π √det for a box far from the mass
    let want = (2.0 * std::f64::consts::PI * (2.0f64 - 0.16).sqrt()).ln();
    assert!((truth["log_z"].as_f64().unwrap() - want).abs() < 1e-9);
}

#[test]
fn estimate_is_reproducible_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    std::fs::write(d.join("cfg.json"), r#"{"seed": 11, "trainer": {"max_epochs": 200}}"#).unwrap();
    let args = |out: &'static str| {
        vec![
            "estimate", "--samples", "g.samples.csv", "--meta", "g.meta.json", "--config", "cfg.json",
            "--max-epochs", "4", "--out", out, "--checkpoint", "model.flow",
        ]
    };
    let first = floz(&args("a.json"), d);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = floz(&args("b.json"), d);
    assert!(second.status.success());

    let a = read_json(&d.join("a.json"));
    let b = read_json(&d.join("b.json"));
    assert_eq!(a["log_evidence"], b["log_evidence"]);
    assert_eq!(a["config_digest"], b["config_digest"]);
    assert_eq!(a["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(a["seed"], 11);
    assert_eq!(a["config"]["trainer"]["max_epochs"], 4);
    assert_eq!(a["training"]["epochs"], 4);
    assert_eq!(a["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(a["estimator"], "mean_log_zeta");
    assert!(a["uncertainty"].as_f64().unwrap() >= 0.0);
    assert!(a["n_in_ball"].as_u64().unwrap() <= a["n_total"].as_u64().unwrap());

    let history = std::fs::read_to_string(d.join("a.json.history.csv")).unwrap();
    assert!(history.starts_with("epoch,w1,w2,w3a,w3b,train_loss,val_loss,val_l1,best"));
    assert_eq!(history.lines().count(), 5);
    let model = FlowModel::load(&d.join("model.flow")).unwrap();
    assert_eq!(model.dim(), 2);

    let summary: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(summary["log_evidence"], a["log_evidence"]);
}

#[test]
fn tiny_ball_exits_with_coverage_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    let out = floz(
        &[
            "estimate", "--samples", "g.samples.csv", "--meta", "g.meta.json", "--out", "r.json",
            "--max-epochs", "1", "--delta", "1e-6",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "insufficient_coverage");
    assert!(err["error"]["fraction"].as_f64().unwrap() < 0.01);
    assert_eq!(read_json(&d.join("r.json")), err);
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate(d);
    std::fs::write(d.join("bad.json"), r#"{"trainer": {"max_epoch": 3}}"#).unwrap();
    let base = ["estimate", "--samples", "g.samples.csv", "--meta", "g.meta.json", "--out", "r.json"];

    let out = floz(&[&base[..], &["--config", "bad.json"]].concat(), d);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "schema");

    std::fs::write(d.join("broken.csv"), "x0,x1,log_unnorm_posterior\n1,2,-1\n1,oops,-2\n").unwrap();
    let out = floz(
        &["estimate", "--samples", "broken.csv", "--meta", "g.meta.json", "--out", "r.json"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "parse");
    assert_eq!(err["error"]["line"], 3);

    let out = floz(&["estimate", "--samples", "g.samples.csv"], d);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_floz"))
        .args(["generate", "spec.json", "--out", "again"])
        .current_dir(d)
        .env("FLOZ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn collinear_samples_exit_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("a,b,log_unnorm_posterior\n");
    for i in 0..200 {
        let x = (i as f64 * 0.37).sin();
        csv.push_str(&format!("{x},{},{}\n", 2.0 * x, -x * x));
    }
    std::fs::write(d.join("s.csv"), csv).unwrap();
    std::fs::write(
        d.join("m.json"),
        r#"{"dim": 2, "names": ["a", "b"], "prior": {"lower": [-3, -3], "upper": [3, 3]}}"#,
    )
    .unwrap();
    let out = floz(&["estimate", "--samples", "s.csv", "--meta", "m.json", "--out", "r.json"], d);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "degenerate_geometry");
}

#[test]
fn validate_writes_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("matrix.json"),
        r#"{
          "cases": [
            {"family": "gaussian", "d": 2, "n_samples": 1000, "seeds": [1, 2]},
            {"family": "rosenbrock", "d": 3, "n_samples": 1000, "seeds": [3]},
            {"family": "gaussian_mixture5", "d": 4, "n_samples": 1000, "seeds": [1]}
          ],
          "config": {"trainer": {"max_epochs": 2}}
        }"#,
    )
    .unwrap();
    let out = floz(&["validate", "--matrix", "matrix.json", "--out-dir", "out"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let o = d.join("out");

    let mut rdr = csv::Reader::from_path(o.join("summary.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    for r in &rows[..2] {
        assert_eq!(&r[col("truth_method")], "quadrature2d");
        assert!(r[col("deviation_sigma")].parse::<f64>().is_ok());
    }
    assert_eq!(&rows[2][col("truth_method")], "none");
    assert_eq!(&rows[2][col("deviation_sigma")], "");
    assert!(rows[3][col("error")].contains("no benchmark"));

    let groups = std::fs::read_to_string(o.join("groups.csv")).unwrap();
    assert!(groups.lines().nth(1).unwrap().starts_with("gaussian,2,1000,2,"));
    assert!(o.join("panel.csv").exists());
    assert!(o.join("gaussian_d2_n1000_s1.json").exists());
    let summary = read_json(&o.join("summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout["failed"], 1);
}

#[test]
fn empty_matrix_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.json"), r#"{"cases": []}"#).unwrap();
    let out = floz(&["validate", "--matrix", "m.json", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

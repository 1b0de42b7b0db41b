use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn venncal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_venncal"))
        .args(args)
        .output()
        .expect("spawn venncal")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let n = n.to_string();
    let seed = seed.to_string();
    let out = venncal(&[
        "synth",
        "--dgp",
        "hetero-gauss",
        "--n",
        &n,
        "--seed",
        &seed,
        "--out",
        &path,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&venncal(&[])), 1);
    assert_eq!(code(&venncal(&["frobnicate"])), 1);
    assert_eq!(
        code(&venncal(&["calibrate", "--data", "x.csv", "--prd", "f"])),
        1
    );
    assert_eq!(
        code(&venncal(&[
            "synth",
            "--dgp",
            "no-such-dgp",
            "--n",
            "5",
            "--seed",
            "1",
            "--out",
            "x"
        ])),
        1
    );
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&venncal(&["--help"])), 0);
    assert_eq!(code(&venncal(&["--version"])), 0);
    assert_eq!(code(&venncal(&["conformal", "--help"])), 0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = venncal(&["calibrate", "--data", "/nonexistent/cal.csv", "--pred", "f"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cal.csv"));
}

#[test]
fn synth_writes_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "d.csv", 250, 4);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,g,y,f,med,mu,q"));
    assert_eq!(lines.count(), 250);

    let again = synth(dir.path(), "e.csv", 250, 4);
    assert_eq!(text, std::fs::read_to_string(again).unwrap());
}

#[test]
fn calibrate_reports_in_sample_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 300, 1);
    for args in [
        vec!["--loss", "se", "--calibrator", "isotonic"],
        vec![
            "--loss",
            "pinball",
            "--alpha",
            "0.2",
            "--calibrator",
            "histogram",
            "--bins",
            "8",
        ],
    ] {
        let mut all = vec!["calibrate", "--data", &data, "--pred", "f"];
        all.extend(args);
        let out = venncal(&all);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let v = json(&out);
        let values = v["calibrator"]["values"].as_array().unwrap();
        assert!(values.windows(2).all(|w| w[0].as_f64() <= w[1].as_f64()));
        assert!(v["in_sample"]["levels"]
            .as_array()
            .unwrap()
            .iter()
            .all(|l| l["passes"] == true));
    }
}

#[test]
fn venn_abers_set_contains_the_point_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", 200, 2);
    let out = venncal(&[
        "venn-abers",
        "--data",
        &data,
        "--pred",
        "f",
        "--x-pred",
        "0.5",
        "--y-bins",
        "40",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 40);
    let preds: Vec<f64> = entries
        .iter()
        .map(|e| e["prediction"].as_f64().unwrap())
        .collect();
    // isotonic Venn predictions are nondecreasing in the imputed outcome
    assert!(preds.windows(2).all(|w| w[0] <= w[1]));

    let out = venncal(&[
        "venn-abers",
        "--data",
        &data,
        "--pred",
        "f",
        "--x-pred",
        "0.1,0.9",
    ]);
    assert_eq!(json(&out).as_array().map(Vec::len), Some(2));
}

#[test]
fn conformal_marginal_covers_and_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cal = synth(dir.path(), "cal.csv", 400, 5);
    let query = synth(dir.path(), "query.csv", 200, 6);
    let rows = dir.path().join("rows.csv").to_string_lossy().into_owned();
    let out = venncal(&[
        "conformal",
        "--data",
        &cal,
        "--query",
        &query,
        "--method",
        "marginal",
        "--quantile",
        "q",
        "--out",
        &rows,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let cov = v["marginal_coverage"].as_f64().unwrap();
    assert!((0.8..=1.0).contains(&cov), "coverage {cov}");
    let text = std::fs::read_to_string(rows).unwrap();
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "data": "#).unwrap();
    let out = venncal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    std::fs::write(&cfg, r#"{"schema_version": 99}"#).unwrap();
    let out = venncal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
            "schema_version": 1,
            "data": {"source": "synthetic", "dgp": "hetero-gauss", "n": 300, "seed": 3},
            "methods": [{"kind": "cp-marginal"}, {"kind": "cp-venn", "bins": 4}],
            "grid": {"y_bins": 40, "pred_bins": 40},
            "replications": 2
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = venncal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.json", "summary.csv"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cp-marginal") && stdout.contains("cp-venn"));
}

use std::collections::HashSet;

use venncal::harness::{run_experiment, ExperimentConfig, SplitSpec};

fn config(seed: u64, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "schema_version": 1,
            "data": {{"source": "synthetic", "dgp": "hetero-gauss", "n": 400, "seed": {seed}}},
            "methods": [{{"kind": "cp-marginal"}}, {{"kind": "cp-venn-abers"}}, {{"kind": "venn", "bins": 4}}],
            "grid": {{"y_bins": 40, "pred_bins": 40}},
            "replications": 3{extra}
        }}"#
    ))
    .expect("config")
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let spec = SplitSpec::default();
    for rep in 0..5 {
        let a = spec.split(101, rep).unwrap();
        assert_eq!(a, spec.split(101, rep).unwrap());
        let all: HashSet<usize> = a
            .train
            .iter()
            .chain(&a.cal)
            .chain(&a.test)
            .copied()
            .collect();
        assert_eq!(all.len(), a.train.len() + a.cal.len() + a.test.len());
        assert_eq!(all.len(), 101);
    }
    assert_ne!(spec.split(101, 0).unwrap(), spec.split(101, 1).unwrap());
}

#[test]
fn experiments_are_deterministic() {
    let a = run_experiment(&config(1, "")).unwrap();
    let b = run_experiment(&config(1, "")).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.failures(), 0);
    assert_eq!(a.replications.len(), 3);

    let c = run_experiment(&config(2, "")).unwrap();
    assert_ne!(a.summary, c.summary);
}

#[test]
fn summaries_cover_every_method() {
    let out = run_experiment(&config(3, "")).unwrap();
    let names: Vec<&str> = out.summary.iter().map(|m| m.method.as_str()).collect();
    assert_eq!(names.len(), 3);
    for m in &out.summary {
        assert_eq!(m.replications_ok, 3, "{}", m.method);
    }
    let marginal = out
        .summary
        .iter()
        .find(|m| m.method == "cp-marginal")
        .unwrap();
    let cov = marginal.marginal_coverage.as_ref().unwrap().mean;
    assert!((0.75..=1.0).contains(&cov), "coverage {cov}");
}

#[test]
fn config_errors_are_reported() {
    assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    let unknown = ExperimentConfig::from_json(
        r#"{"schema_version": 1, "data": {"source": "synthetic", "dgp": "hetero-gauss", "n": 50},
            "methods": [{"kind": "cp-marginal"}], "bogus": 1}"#,
    );
    assert!(unknown.is_err());
    let bad_split = ExperimentConfig::from_json(
        r#"{"schema_version": 1, "data": {"source": "synthetic", "dgp": "hetero-gauss", "n": 50},
            "methods": [{"kind": "cp-marginal"}], "split": {"train": 0.5, "cal": -1, "test": 0.5}}"#,
    );
    assert!(bad_split.is_err());
}

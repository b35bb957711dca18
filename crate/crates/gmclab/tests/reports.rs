use gmclab::experiment::{plot_script, report, run, smoke_config, write_report, ExperimentConfig};

#[test]
fn single_replica_reports_missing_standard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config("brw", 5).unwrap();
    cfg.replicas = 1;
    let files = run(&cfg, dir.path()).unwrap();
    let rep = report(&files.csv).unwrap();
    assert_eq!(rep.rows, 1);
    assert!(rep.notes.iter().any(|n| n.contains("standard errors unavailable")), "{:?}", rep.notes);
    assert!(rep.columns.iter().all(|c| c.se.is_none()));
}

#[test]
fn all_rows_failing_is_reported_as_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config("brw", 5).unwrap();
    cfg.params.insert("depth".into(), 30.0);
    cfg.replicas = 2;
    let files = run(&cfg, dir.path()).unwrap();
    let rep = report(&files.csv).unwrap();
    assert!(rep.no_data);
    assert_eq!(rep.failed_rows, 2);
    assert!(!rep.all_checks_pass);
}

#[test]
fn kernel_check_report_matches_the_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new("kernel_check", 1, 1);
    let files = run(&cfg, dir.path()).unwrap();
    let (rep, json, gp) = write_report(&files.csv).unwrap();
    assert!(json.exists() && gp.exists());
    assert!(!rep.checks.is_empty());
    assert!(rep.all_checks_pass, "{:?}", rep.checks);
}

#[test]
fn plot_script_targets_the_csv_and_every_trend() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config("brw", 2).unwrap();
    cfg.params.clear();
    let files = run(&cfg, dir.path()).unwrap();
    let rep = report(&files.csv).unwrap();
    let script = plot_script(&files.csv, &rep);
    let name = files.csv.file_name().unwrap().to_string_lossy().into_owned();
    assert!(script.contains(&name));
    assert!(!rep.trends.is_empty());
    for t in &rep.trends {
        assert!(script.contains(&t.name), "trend {} not plotted", t.name);
    }
}

#[test]
fn sidecar_hash_matches_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config("selftest_gaussian", 9).unwrap();
    let files = run(&cfg, dir.path()).unwrap();
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(&files.sidecar).unwrap()).unwrap();
    assert_eq!(side["config_hash"], cfg.hash());
    assert_eq!(side["rows"], 4);
}

use std::path::Path;
use std::process::Command;

fn gmclab(out: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gmclab"));
    c.env("GMCLAB_OUT", out).env_remove("RUST_LOG");
    c
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_suite_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmclab(dir.path()).args(["suite", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nonsense"), "{err}");
}

#[test]
fn kernel_check_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmclab(dir.path()).args(["kernel", "check", "--replicas", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"), "{stdout}");
    assert!(!stdout.contains("[FAIL]"), "{stdout}");
    let csv = &csv_files(dir.path())[0];
    for ext in ["json", "summary.json", "gp"] {
        assert!(csv.with_extension(ext).exists(), "missing {ext}");
    }
}

#[test]
fn repeated_runs_give_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let st = gmclab(d.path())
            .args(["selftest", "gaussian", "--replicas", "3", "--seed", "7", "--param", "paths_per_replica=2000", "--param", "dt=0.01"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let fa = &csv_files(a.path())[0];
    let fb = &csv_files(b.path())[0];
    assert_eq!(fa.file_name(), fb.file_name());
    assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
}

#[test]
fn config_file_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("brw.toml");
    std::fs::write(&cfg, "schema_version = 1\nexperiment = \"brw\"\nseed = 3\nreplicas = 4\n\n[params]\ndepth = 6\n").unwrap();
    let st = gmclab(dir.path()).args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert!(st.success());
    let csv = &csv_files(dir.path())[0];
    std::fs::remove_file(csv.with_extension("summary.json")).unwrap();
    let out = gmclab(dir.path()).arg("report").arg(csv).output().unwrap();
    assert!(out.status.success());
    assert!(csv.with_extension("summary.json").exists());
}

#[test]
fn mismatched_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("brw.toml");
    std::fs::write(&cfg, "schema_version = 1\nexperiment = \"brw\"\nseed = 3\nreplicas = 4\n").unwrap();
    let out = gmclab(dir.path()).args(["qv", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

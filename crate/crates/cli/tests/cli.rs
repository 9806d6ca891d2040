use std::process::{Command, Output};

fn killwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_killwalk"))
        .args(args)
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn malformed_atom_names_the_field() {
    let out = killwalk(&["--dist", r#"{"kind":"finite","atoms":[[0,0.5],[1]]}"#, "alpha"]);
    assert!(!out.status.success());
    let rec = error_record(&out);
    assert_eq!(rec["error"]["field"], "distribution.atoms[1]");
    assert_eq!(rec["error"]["exit_code"], 2);
}

#[test]
fn negative_atom_rejected_with_field() {
    let out = killwalk(&["--dist", r#"{"kind":"finite","atoms":[[-1,0.5],[1,0.5]]}"#, "alpha"]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["error"]["field"], "distribution.atoms[0].value");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"command":"alpha","alpha":{"n_sample":5}}"#).unwrap();
    let out = killwalk(&["--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["error"]["field"], "alpha.n_sample");
}

#[test]
fn missing_command_is_an_error() {
    let out = killwalk(&["--seed", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["field"], "command");
}

#[test]
fn selftest_passes() {
    let out = killwalk(&["selftest"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("check,expected,got,abs_err,tol,pass\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn manifest_rerun_and_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    let out = killwalk(&[
        "alpha",
        "--n-samples",
        "50",
        "--seed",
        "4",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest_path = dir.path().join("a.csv.manifest.json");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 4);
    assert_eq!(manifest["config"]["alpha"]["n_samples"], 50);

    let second = dir.path().join("b.csv");
    let again = killwalk(&[
        "--config",
        manifest_path.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(&second).unwrap(), std::fs::read(&first).unwrap());

    let third = dir.path().join("c.json");
    let args = [
        "--config",
        manifest_path.to_str().unwrap(),
        "--seed",
        "5",
        "--format",
        "json",
        "--out",
    ];
    let other = killwalk(&[&args[..], &[third.to_str().unwrap()]].concat());
    assert!(other.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&third).unwrap()).unwrap();
    assert_eq!(v["estimate"]["params"]["seed"], 5);
}

#[test]
fn green_reads_reduced_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("rho.json");
    let out = killwalk(&[
        "tree-reduce",
        "--n-samples",
        "0",
        "--env-out",
        env.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let g = killwalk(&["green", "--env", env.to_str().unwrap(), "--distances", "2,4"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let csv = String::from_utf8(g.stdout).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        let ratio: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }
}

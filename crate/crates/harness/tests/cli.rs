use std::process::Command;

fn priorreg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_priorreg"));
    c.env("RUST_LOG", "error").env_remove("PRIORREG_SEED");
    c
}

#[test]
fn lists_presets() {
    let out = priorreg().arg("presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "reaction-case2-prior15"));
    assert!(text.lines().any(|l| l == "pendulum-hnn"));
}

#[test]
fn unknown_preset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorreg().args(["--out"]).arg(dir.path()).args(["tune", "--preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn config_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = priorreg_harness::preset("smoke", priorreg_harness::Scale::Desk).unwrap();
    let mut v = serde_json::to_value(&cfg).unwrap();
    v["train"]["dropout"] = serde_json::json!(0.2);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = priorreg().arg("--config").arg(&path).args(["tune"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
}

#[test]
fn seed_from_environment_reaches_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorreg()
        .env("PRIORREG_SEED", "5")
        .arg("--out")
        .arg(dir.path())
        .args(["generate-data", "--preset", "smoke"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("smoke/seed-5/dataset.json").exists());
}

#[test]
fn reproduce_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = priorreg()
        .arg("--out")
        .arg(dir.path())
        .args(["reproduce", "smoke", "--seeds", "0,1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = priorreg_harness::read_report(&dir.path().join("smoke/report.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].tuned_std.is_some());

    let out = priorreg().arg("report").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let summary = priorreg_harness::read_report(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0].seeds, vec![0, 1]);
}

use std::fs;
use std::process::Command;

fn periop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_periop"))
}

#[test]
fn synth_writes_cohort_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.ini");
    fs::write(&cfg, "seed = 4\n[synth]\nn_patients = 60\n").unwrap();
    let out = tmp.path().join("cohort");
    let status = periop()
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9", "--jobs", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["patients.csv", "timeseries.csv", "labs.csv", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 9"));
}

#[test]
fn invalid_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.ini");
    fs::write(&cfg, "train_fraction = 1.0\n").unwrap();
    let status = periop().arg("run").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));

    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let status = periop().arg("label").arg("--config").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn corrupted_report_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    fs::write(&report, "not json").unwrap();
    let output = periop().arg("compare").arg(&report).output().unwrap();
    assert_eq!(output.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&output.stderr).contains("compare"));
}

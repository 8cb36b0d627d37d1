use std::path::Path;
use std::process::{Command, Output};

use hho_wave::cli::{parse_report_csv, parse_report_json};

fn hho_wave(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hho-wave"))
        .args(args)
        .env_remove("HHO_WAVE_JOBS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn unknown_variant_exits_with_one() {
    let out = hho_wave(&["--variant", "diagonal"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagonal"));
}

#[test]
fn invalid_numbers_exit_with_one() {
    assert_eq!(hho_wave(&["--degree", "7"]).status.code(), Some(1));
    assert_eq!(hho_wave(&["--mesh", "0"]).status.code(), Some(1));
    assert_eq!(hho_wave(&["--tfinal", "-1"]).status.code(), Some(1));
    assert_eq!(hho_wave(&["--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn config_file_with_unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("study.json");
    std::fs::write(&path, r#"{"degree": 1, "colour": "blue"}"#).unwrap();
    let out = hho_wave(&["--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = hho_wave(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("--assert-rates"));
}

#[test]
fn selftest_passes() {
    let out = hho_wave(&["--selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("0 failed"));
}

#[test]
fn selftest_catches_flipped_stabilization() {
    let out = hho_wave(&["--selftest", "--flip-tau"]);
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("FAIL energy-dissipation")));
    assert!(text.lines().any(|l| l.starts_with("FAIL transmission")));
    assert!(!text.lines().any(|l| l.starts_with("FAIL stab-id")));
}

fn study(prefix: &Path) -> Output {
    hho_wave(&[
        "--degree",
        "1",
        "--variant",
        "mixed",
        "--mesh",
        "4",
        "--refinements",
        "1",
        "--out",
        prefix.to_str().unwrap(),
        "--assert-rates",
    ])
}

#[test]
fn small_study_meets_rates_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/run");
    let b = dir.path().join("b/run");
    let out = study(&a);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS eoc err_int_v"));
    assert_eq!(study(&b).status.code(), Some(0));

    let csv_a = std::fs::read(a.with_extension("csv")).unwrap();
    let csv_b = std::fs::read(b.with_extension("csv")).unwrap();
    assert_eq!(csv_a, csv_b, "CSV reports differ between identical runs");

    let report = parse_report_csv(std::str::from_utf8(&csv_a).unwrap()).unwrap();
    assert_eq!(report.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![4, 8]);
    assert!(report.h_halves());

    let json = parse_report_json(&std::fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json.rows.len(), 2);
    assert!(json.rate_checks.iter().all(|c| c.passed));
    assert!(json.notes.iter().any(|n| n.contains("s = 1")));
}

#[test]
fn jobs_setting_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |prefix: &Path, jobs: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_hho-wave"))
            .args(["--degree", "0", "--mesh", "2", "--refinements", "1", "--tfinal", "0.25", "--out"])
            .arg(prefix)
            .env("HHO_WAVE_JOBS", jobs)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        std::fs::read(prefix.with_extension("csv")).unwrap()
    };
    assert_eq!(run(&dir.path().join("one"), "1"), run(&dir.path().join("two"), "2"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparse_scale_attn::analysis::Report;
use sparse_scale_attn::harness::commands::exit_status;
use sparse_scale_attn::harness::HarnessConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-scale-attn"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn small() -> String {
    configs().join("small.cfg").display().to_string()
}

#[test]
fn shipped_configs_parse() {
    let text = fs::read_to_string(configs().join("default.cfg")).unwrap();
    assert_eq!(HarnessConfig::parse(&text).unwrap(), HarnessConfig::default());
    let text = fs::read_to_string(small()).unwrap();
    HarnessConfig::parse(&text).unwrap().validate().unwrap();
}

#[test]
fn verify_on_small_config_exits_zero() {
    let out = run(&["verify", "--config", &small()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = Report::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert!(!report.checks.is_empty());
    assert!(report.all_passed());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("PASS ")).count(), report.checks.len());
}

#[test]
fn mask_writes_json_csv_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["mask", "--config", &small(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());

    let report = Report::from_json(&fs::read_to_string(dir.path().join("mask.json")).unwrap()).unwrap();
    let s = report.metrics["block_sparsity"];
    assert!((0.0..=1.0).contains(&s));

    // Scale 7 of the small schedule: 256 queries and 521 keys in 16×16 tiles.
    let pgm = fs::read(dir.path().join("mask_b16.pgm")).unwrap();
    let header = b"P5\n33 16\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 33 * 16);
    let active = pixels.iter().filter(|&&p| p == 255).count();
    assert!(pixels.iter().all(|&p| p == 0 || p == 255));
    assert!((1.0 - active as f64 / (33.0 * 16.0) - s).abs() < 1e-12);

    let csv = fs::read_to_string(dir.path().join("mask_b16.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("u,v"));
    assert_eq!(csv.lines().count(), active + 1);
    assert!(dir.path().join("sparsity.csv").exists());
}

#[test]
fn analyze_and_bench_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for cmd in ["analyze", "bench"] {
        let out = run(&[cmd, "--config", &small(), "--out", d, "--seed", "3"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let report = Report::from_json(&fs::read_to_string(dir.path().join(format!("{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(report.seed, 3);
        assert_eq!(report.config["seed"], "3");
        report.validate().unwrap();
    }
    for f in ["similarity.csv", "sink_curve.csv", "recall.csv"] {
        assert!(fs::read_to_string(dir.path().join(f)).unwrap().lines().count() > 1, "{f}");
    }
}

#[test]
fn outputs_are_deterministic() {
    let a = run(&["analyze", "--config", &small(), "--seed", "9"]);
    let b = run(&["analyze", "--config", &small(), "--seed", "9"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let c = run(&["analyze", "--config", &small(), "--seed", "10"]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn json_report_round_trips() {
    let out = run(&["mask", "--config", &small()]);
    let text = String::from_utf8(out.stdout).unwrap();
    let report = Report::from_json(&text).unwrap();
    assert_eq!(Report::from_json(&report.to_json().unwrap()).unwrap(), report);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.cfg", "frobnicate=1\n", "unknown"),
        ("malformed.cfg", "schedule=1,2,4\nthis line has no equals\n", "line 2"),
        ("range.cfg", "schedule=1,2,4\ntarget_scale=9\n", "scale 9 out of range"),
        ("windows.cfg", "windows=3,4,7\n", "odd"),
    ];
    for (name, body, needle) in cases {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        let out = run(&["mask", "--config", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{name}: {err}");
    }
    let out = run(&["mask", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_arguments_are_rejected() {
    assert_ne!(run(&["frobnicate", "--config", &small()]).status.code(), Some(0));
    assert_ne!(run(&["mask", "--config", &small(), "--preset", "nope"]).status.code(), Some(0));
    assert_ne!(run(&["mask"]).status.code(), Some(0));
}

#[test]
fn preset_sets_full_shape() {
    let out = run(&["mask", "--config", &small(), "--preset", "infinity-1k-last"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = Report::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(report.config["heads"], "24");
    assert_eq!(report.config["head_dim"], "128");
    assert_eq!(report.config["target_scale"], "13");
}

#[test]
fn failed_check_maps_to_exit_one() {
    let mut r = Report::new("verify", 0, Default::default());
    r.check("a", true, "");
    assert_eq!(exit_status(&r), 0);
    r.check("b", false, "deliberately failing");
    assert_eq!(exit_status(&r), 1);
}

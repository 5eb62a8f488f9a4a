//! End-to-end checks of the `gkin` binary: exit codes, report files, and
//! rerun determinism. Heavy subcommands are exercised through small
//! configurations; the numerical claims themselves live in the library's
//! acceptance suite.

use std::path::Path;
use std::process::{Command, Output};

fn gkin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkin")).args(args).output().expect("spawn gkin")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn read_summary(dir: &Path, name: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{name}.summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{not json").unwrap();
    let out = gkin(&["--config", cfg.to_str().unwrap(), "verify-geometry"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"nam": "x"}"#).unwrap();
    let out = gkin(&["--config", cfg.to_str().unwrap(), "verify-geometry"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn unknown_counterexample_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gkin(&["--out", dir.path().to_str().unwrap(), "counterexample", "wedge"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn verify_geometry_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = gkin(&["--out", dir.path().to_str().unwrap(), "--workers", "1", "verify-geometry"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 3);
    assert!(!stdout.contains("FAIL"));
    let summary = read_summary(dir.path(), "run");
    assert_eq!(summary["subcommand"], "verify-geometry");
    assert!(summary["failures"].as_array().unwrap().is_empty());
    assert!(!summary["claims"].as_array().unwrap().is_empty());
    // The echoed config records every resolved default.
    for key in ["domain", "kernel", "solver", "data", "norms", "seed"] {
        assert!(summary["config"].get(key).is_some(), "config echo missing {key}");
    }
}

#[test]
fn reruns_are_deterministic() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let out = gkin(&["--out", d.path().to_str().unwrap(), "--workers", "1", "verify-kernel"]);
        assert_eq!(exit_code(&out), 0);
    }
    // Artifact CSVs are byte-identical across reruns; the summaries differ
    // only in the artifact paths they point at.
    let csv1 = std::fs::read(d1.path().join("run.kernel.csv")).unwrap();
    let csv2 = std::fs::read(d2.path().join("run.kernel.csv")).unwrap();
    assert_eq!(csv1, csv2);
    let s1 = read_summary(d1.path(), "run");
    let s2 = read_summary(d2.path(), "run");
    assert_eq!(s1["claims"], s2["claims"]);
    assert_eq!(s1["config"], s2["config"]);
}

#[test]
fn grazing_threshold_verdicts_in_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"norms": [{"p": 2.9}, {"p": 3.0}]}"#).unwrap();
    let out = gkin(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "grazing",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let conv = std::fs::read_to_string(dir.path().join("run.grazing-p2.9.csv")).unwrap();
    let last = conv.lines().last().unwrap();
    assert!(last.ends_with("CONVERGENT"), "p=2.9 on the ball must converge: {last}");

    let div = std::fs::read_to_string(dir.path().join("run.grazing-p3.csv")).unwrap();
    assert!(div.lines().skip(1).all(|l| l.ends_with("DIVERGENT")), "p=3 is the ball threshold");
}

#[test]
fn solve_without_scattering_is_exact_and_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{
          "domain": {"kind": "ball", "radius": 0.1},
          "solver": {"grid": {"n_x": 6, "n_v_r": 6, "n_v_ang": 4, "v_max": 6.0},
                     "scattering": false, "mc_paths": 500}
        }"#,
    )
    .unwrap();
    let out = gkin(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "solve",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let summary = read_summary(dir.path(), "run");
    let claims = summary["claims"].as_array().unwrap();
    let exact = claims.iter().find(|c| c["id"] == "solve.kernel_off_exact").unwrap();
    assert_eq!(exact["measured"], 0.0);
    let probes = std::fs::read_to_string(dir.path().join("run.probes.csv")).unwrap();
    assert!(probes.starts_with("x1,x2,x3,v1,v2,v3,det,mc,mc_se"));
    assert_eq!(probes.lines().count(), 21);
    assert!(dir.path().join("run.iterations.csv").exists());
}

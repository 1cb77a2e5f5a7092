use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

const FIXTURE: &str = include_str!("../../core/fixtures/cat_over_rotation.cfg");

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fibrewise")).args(args).output().unwrap()
}

fn run_config(name: &str, command: &str, text: &str) -> Output {
    let dir = scratch(name);
    let path = dir.join("system.cfg");
    fs::write(&path, text).unwrap();
    run(&[command, "--config", path.to_str().unwrap()])
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn small(system: &str) -> String {
    format!(
        "name = \"small\"\nseed = 3\n{system}\n[certify]\ngrid = 8\n[conjugate]\ngrid = 6\nsamples = 50\ninjectivity_fibres = 2\ninjectivity_pairs = 5\n"
    )
}

const IDENTITY: &str = "[system]\nfibre_dim = 2\nbase_dim = 1\nmatrix = [[1, 0], [0, 1]]\n[system.base]\nkind = \"translation\"\nalpha = [0.3]\n";

#[test]
fn non_unimodular_matrix_names_the_determinant() {
    let cfg = FIXTURE.replace("matrix = [[2, 1], [1, 1]]", "matrix = [[2, 0], [0, 1]]");
    let o = run_config("det2", "homology", &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("determinant is 2"), "{}", text(&o));
}

#[test]
fn identity_fails_certification() {
    let o = run_config("identity_certify", "certify", &small(IDENTITY));
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
}

#[test]
fn identity_cannot_be_conjugated() {
    let o = run_config("identity_conjugate", "conjugate", &small(IDENTITY));
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("not hyperbolic"), "{}", text(&o));
}

#[test]
fn mismatched_model_is_rejected() {
    let cfg = format!("{FIXTURE}\n[model]\nmatrix = [[1, 1], [1, 2]]\n");
    let o = run_config("mismatch", "conjugate", &cfg);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("homology"), "{}", text(&o));
}

#[test]
fn missing_config_and_unknown_command() {
    assert_eq!(run(&["certify"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["certify", "--config", "/nonexistent/x.cfg"]).status.code(), Some(2));
}

#[test]
fn homology_of_fixture_passes() {
    let o = run_config("homology", "homology", FIXTURE);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("PASS"));
}

#[test]
fn json_output_parses() {
    let dir = scratch("json");
    let path = dir.join("system.cfg");
    fs::write(&path, FIXTURE).unwrap();
    let o = run(&["homology", "--json", "--config", path.to_str().unwrap()]);
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.trim_start().starts_with('{') && s.contains("\"config_digest\""), "{s}");
}

#[test]
fn certify_reports_are_reproducible() {
    let dir = scratch("repeat");
    let cfg = dir.join("system.cfg");
    fs::write(&cfg, FIXTURE.replace("grid = 64", "grid = 16")).unwrap();
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.join(format!("run{k}"));
        let o = run(&["certify", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(out.join("timing.json").exists());
        reports.push((o.status.code(), o.stdout, fs::read(out.join("report.json")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

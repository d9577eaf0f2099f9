use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gmmct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmct")).args(args).env("RUST_LOG", "error").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_verb() {
    let o = gmmct(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for verb in ["simulate", "reconstruct", "run", "check-gradients", "report"] {
        assert!(text.contains(verb), "{verb}");
    }
}

#[test]
fn config_problems_map_to_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"n_particles\": 5}").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&gmmct(&["simulate", "--config", path(&bad), "--out", path(&out)])), 2);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&gmmct(&["simulate", "--config", path(&missing), "--out", path(&out)])), 5);
}

#[test]
fn reconstruct_needs_a_sinogram() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gmmct(&["reconstruct", "--out", path(dir.path())])), 2);
}

#[test]
fn report_without_an_estimate_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gmmct(&["simulate", "--out", path(dir.path()), "--force"])), 0);
    assert_eq!(code(&gmmct(&["report", "--out", path(dir.path())])), 5);
}

#[test]
fn simulate_then_reconstruct_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&gmmct(&["simulate", "--out", path(&data)])), 0);
    for name in ["config.json", "truth.json", "sinogram.txt"] {
        assert!(data.join(name).exists(), "{name}");
    }
    // The directory is now non-empty.
    assert_eq!(code(&gmmct(&["simulate", "--out", path(&data)])), 5);

    let rec = dir.path().join("rec");
    let sino = data.join("sinogram.txt");
    let truth = data.join("truth.json");
    let o = gmmct(&[
        "reconstruct",
        "--config",
        path(&data.join("config.json")),
        "--sinogram",
        path(&sino),
        "--truth",
        path(&truth),
        "--out",
        path(&rec),
        "--stage",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rec.join("trajectories.json").exists());
    assert!(rec.join("modes.tsv").exists());
    assert!(!rec.join("estimate.json").exists());
}

#[test]
fn gradient_audit_passes() {
    let o = gmmct(&["check-gradients", "--count", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

//! End-to-end runs of the `tumorctl` binary: exit codes, error lines and
//! the files each subcommand leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tumorctl::snapshot::read_snapshot;

const SMALL: &str = "seed = 3\n[domain]\ncells = 24\n[time]\nsteps = 12\n[optimizer]\nmax_iters = 20\n";

fn tumorctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorctl")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.ini");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let o = tumorctl(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = tumorctl(&["simulate"]);
    assert_eq!(o.status.code(), Some(1), "missing --config");

    let o = tumorctl(&["simulate", "--config", "/nonexistent/run.ini"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=usage"), "{}", stderr(&o));

    assert_eq!(tumorctl(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_1_with_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nalpha = 0\n");
    let o = tumorctl(&["simulate", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=config exit=1"), "{err}");
    assert!(err.contains("model.alpha"), "{err}");

    let cfg = write_config(tmp.path(), "[model]\nalpha = 1\n[bogus]\nx = 1\n");
    let err = stderr(&tumorctl(&["simulate", "--config", &cfg]));
    assert!(err.contains("bogus") && err.contains("line 3"), "{err}");

    let cfg = write_config(tmp.path(), SMALL);
    let o = tumorctl(&["simulate", "--config", &cfg, "--override", "box.u_lo=-0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("box.u_lo"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sim");
    let o = tumorctl(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("simulate cost="));
    for f in ["effective.ini", "monitors.csv", "newton.csv", "mass.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let monitors = fs::read_to_string(out.join("monitors.csv")).unwrap();
    assert_eq!(monitors.lines().count(), 1 + 13);
    let last = read_snapshot(&out.join("snapshots/level_00012.tgf")).unwrap();
    assert_eq!(last.cells, vec![24]);
    assert!(last.get("phi").unwrap().iter().all(|v| v.abs() < 1.0));
    let effective = fs::read_to_string(out.join("effective.ini")).unwrap();
    assert!(effective.contains("cells = 24"), "{effective}");
}

#[test]
fn optimize_converges_and_writes_history() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("opt");
    let o = tumorctl(&["optimize", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("termination=Stationary"), "{}", stdout(&o));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let costs: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
    let controls = read_snapshot(&out.join("controls.tgf")).unwrap();
    assert_eq!(controls.fields.len(), 24);
    assert!(controls.get("u_00000").unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn gradcheck_and_verify_pass_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = tumorctl(&["gradcheck", "--config", &cfg, "--out", tmp.path().join("g").to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("pass=true"));

    let o = tumorctl(&["verify", "--config", &cfg, "--out", tmp.path().join("v").to_str().unwrap(), "--jobs", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("v/verify.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn loose_newton_tolerance_fails_verification_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = tumorctl(&["verify", "--config", &cfg, "--out", tmp.path().join("v").to_str().unwrap(), "--override", "solver.newton_tol=1e-4"]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).starts_with("error kind=verification exit=3"), "{}", stderr(&o));
    assert!(stdout(&o).contains("pass=false"));
}

#[test]
fn solver_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = tumorctl(&["simulate", "--config", &cfg, "--override", "solver.max_newton_iters=1", "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=solver"), "{}", stderr(&o));
}

#[test]
fn sweep_runs_every_combination() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("sweep");
    let o = tumorctl(&[
        "sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "3",
        "--vary", "model.chi=0.25,0.5", "--vary", "potential.variant=regular,logarithmic",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "run,model.chi,potential.variant,status,cost,stationarity,min_phi,max_phi,message");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("run_000,0.25,regular,ok,"));
    assert!(lines[4].starts_with("run_003,0.5,logarithmic,ok,"));
    assert!(out.join("run_003/monitors.csv").is_file());

    let o = tumorctl(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--vary", "model.alpha=1,0"]);
    assert_eq!(o.status.code(), Some(2), "one failing run fails the sweep");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("run_001,0,failed"), "{summary}");
}

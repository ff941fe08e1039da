use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sbrk_core::orchestrate::{self, OrchestrateError, RunOptions};

const SBRK: &str = env!("CARGO_BIN_EXE_sbrk");

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}

/// A generator on a one-port switch; either side may be replaced by another program.
fn config(dir: &Path, gen_binary: Option<&Path>, switch_binary: Option<&Path>) -> PathBuf {
    let bin = |b: Option<&Path>| b.map_or(String::new(), |b| format!("binary = \"{}\"\n", b.display()));
    let text = format!(
        "name = \"small\"\nduration_ns = 100000\n\
         [[component]]\nid = \"g0\"\nkind = \"pktgen\"\nmac = \"02:00:00:00:00:01\"\n{}\
         [[component]]\nid = \"s\"\nkind = \"switch\"\nports = 1\n{}\
         [[channel]]\na = \"g0.eth\"\nb = \"s.p0\"\n",
        bin(gen_binary),
        bin(switch_binary)
    );
    let p = dir.join("small.toml");
    fs::write(&p, text).unwrap();
    p
}

fn opts() -> RunOptions {
    let mut o = RunOptions::new(SBRK);
    o.startup_timeout = Duration::from_secs(20);
    o
}

#[test]
fn small_run_succeeds_and_leaves_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), None, None);
    let art = orchestrate::run(&cfg, &tmp.path().join("out"), &opts()).unwrap();
    assert_eq!(art.ids, ["g0", "s"]);
    let summary = fs::read_to_string(art.dir.summary()).unwrap();
    assert!(summary.contains("status=ok") && summary.contains("exit.g0=0") && summary.contains("exit.s=0"), "{summary}");
    for id in ["g0", "s"] {
        assert!(art.dir.trace(id).exists());
        let res = art.dir.read_result(id).unwrap();
        assert!(res.iter().any(|l| l.contains("sync_rx=")), "{res:?}");
    }
}

#[test]
fn missing_binary_is_a_spawn_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), None, Some(Path::new("/nonexistent/sbrk-switch")));
    let t = Instant::now();
    let err = orchestrate::run(&cfg, &tmp.path().join("out"), &opts()).unwrap_err();
    assert!(matches!(&err, OrchestrateError::SpawnFailed { id, .. } if id == "s"), "{err}");
    assert!(t.elapsed() < Duration::from_secs(10));
}

#[test]
fn component_that_never_connects_times_out() {
    let tmp = tempfile::tempdir().unwrap();
    let hang = script(tmp.path(), "hang.sh", "exec sleep 60");
    let cfg = config(tmp.path(), Some(&hang), None);
    let mut o = opts();
    o.startup_timeout = Duration::from_millis(800);
    let t = Instant::now();
    let err = orchestrate::run(&cfg, &tmp.path().join("out"), &o).unwrap_err();
    let OrchestrateError::StartupTimeout(missing) = &err else { panic!("{err}") };
    assert!(missing.contains(&"g0".to_string()), "{missing:?}");
    assert!(t.elapsed() < Duration::from_secs(10));
}

#[test]
fn crashing_component_is_reported_with_its_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let crash = script(tmp.path(), "crash.sh", "exit 3");
    let cfg = config(tmp.path(), None, Some(&crash));
    let err = orchestrate::run(&cfg, &tmp.path().join("out"), &opts()).unwrap_err();
    assert!(matches!(&err, OrchestrateError::ComponentCrashed { id, code: Some(3) } if id == "s"), "{err}");
}

#[test]
fn stalled_run_trips_the_watchdog() {
    let tmp = tempfile::tempdir().unwrap();
    // Arguments are: component <config> --id <id> ...
    let stall = script(tmp.path(), "stall.sh", "touch \"$4.ready\"\nexec sleep 60");
    let cfg = config(tmp.path(), Some(&stall), Some(&stall));
    let mut o = opts();
    o.watchdog = Some(Duration::from_millis(300));
    let t = Instant::now();
    let err = orchestrate::run(&cfg, &tmp.path().join("out"), &o).unwrap_err();
    assert!(matches!(err, OrchestrateError::WatchdogTimeout(_)), "{err}");
    assert!(t.elapsed() < Duration::from_secs(10));
}

#[test]
fn cli_exit_status_reflects_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\nduration_ns = 0\n").unwrap();
    let out = Command::new(SBRK).arg("validate").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("duration_ns must be positive"));

    let cfg = config(tmp.path(), None, Some(Path::new("/nonexistent/x")));
    let out = Command::new(SBRK).arg("run").arg(&cfg).arg("-o").arg(tmp.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed to spawn s"));

    let good = config(tmp.path(), None, None);
    let out = Command::new(SBRK).arg("validate").arg(&good).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

//! End-to-end CLI checks: exit codes, emitted files, and rerun determinism.

use std::path::Path;
use std::process::Command;

fn fusesim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusesim"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn single_run_emits_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(
        &cfg,
        "[system]\nn_gpus = 4\n[workload]\nm = 256\nn = 512\nk = 64\n",
    );
    let out = fusesim()
        .args(["--config", cfg.to_str().unwrap(), "--mode", "fused", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = dir.path().join("report-gemm-256x512x64-fused.json");
    let text = std::fs::read_to_string(report).unwrap();
    let parsed = fusesim::report::SimReport::from_json(&text).unwrap();
    assert_eq!(parsed.mode, fusesim::engine::RunMode::Fused);
    assert_eq!(parsed.schema_version, 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    // single GPU cannot form a ring
    write(&cfg, "[system]\nn_gpus = 1\n[workload]\nm = 128\nn = 128\nk = 32\n");
    let out = fusesim().args(["--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_gpus"));

    // unknown keys are rejected
    write(&cfg, "[system]\nn_gpu = 4\n");
    let out = fusesim().args(["--config", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // unknown mode
    write(&cfg, "[workload]\nm = 128\nn = 128\nk = 32\n");
    let out = fusesim()
        .args(["--config", cfg.to_str().unwrap(), "--mode", "warp-speed"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ccdwl_relation_warns_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("warn.toml");
    write(
        &cfg,
        "[system]\nn_gpus = 2\nccdwl_cycles = 3\n[workload]\nm = 128\nn = 256\nk = 32\n",
    );
    let out = fusesim().args(["--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ccdwl"));
}

#[test]
fn trace_flag_writes_event_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write(&cfg, "[system]\nn_gpus = 2\n[workload]\nm = 128\nn = 256\nk = 32\n");
    let out = fusesim()
        .args(["--config", cfg.to_str().unwrap(), "--trace", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let trace = dir.path().join("trace-gemm-128x256x32-sequential.csv");
    let text = std::fs::read_to_string(trace).unwrap();
    assert!(text.starts_with("time_ns,seq,action"));
    assert!(text.lines().count() > 10);
}

#[test]
fn rs_validation_sweep_reports_errors_under_band() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v.toml");
    write(&cfg, "[system]\nn_gpus = 4\n[workload]\nm = 128\nn = 128\nk = 32\n");
    let out = fusesim()
        .args(["--config", cfg.to_str().unwrap(), "--sweep", "rs-validation"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let err: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!(err.abs() <= 10.0, "alpha-beta error out of band: {line}");
        rows += 1;
    }
    assert_eq!(rows, 6); // 6, 12, 24, 48, 96, 192 MB
}

#[test]
fn sweep_rerun_is_byte_identical() {
    // determinism across process invocations, on a reduced sweep via config
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    write(&cfg, "[system]\nn_gpus = 4\n[workload]\nm = 512\nn = 1024\nk = 128\n");
    let run = || {
        let out = fusesim()
            .args(["--config", cfg.to_str().unwrap(), "--mode", "fused-mca"])
            .output()
            .unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run(), run());
}

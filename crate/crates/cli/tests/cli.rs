use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn minos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minos"))
        .args(args)
        .env_remove("MINOS_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn run_short(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--output-dir", out.to_str().unwrap(), "--workload.duration_ms", "60000"];
    args.extend_from_slice(extra);
    minos(&args)
}

#[test]
fn default_config_round_trips() {
    let out = minos(&["print-default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["retry_cap = 5", "pass_fraction = 0.4", "vu_count = 10", "duration_ms = 1800000"] {
        assert!(text.contains(key), "missing {key}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    fs::write(&path, &text).unwrap();
    let out = minos(&["pretest", "--config", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("10 scores"));
}

#[test]
fn run_writes_outputs_and_they_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_short(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 6);

    let trace = dir.path().join("trace_minos_seed1.csv");
    let summary = dir.path().join("summary_minos_seed1.json");
    let header = fs::read_to_string(&trace).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with(
        "invocation_id,vu_id,attempt_index,classification,node_id,perf_factor,prepare_ms,benchmark_ms,benchmark_score,compute_ms,billed_ms,submitted_at,completed_at"
    ));
    let ok = minos(&["verify", trace.to_str().unwrap(), "--summary", summary.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let billed: u64 = row[10].parse().unwrap();
    let mut tampered: Vec<String> = row.iter().map(|s| s.to_string()).collect();
    tampered[10] = (billed + 7).to_string();
    lines[1] = tampered.join(",");
    fs::write(&trace, lines.join("\n") + "\n").unwrap();
    let bad = minos(&["verify", trace.to_str().unwrap(), "--summary", summary.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_short(a.path(), &["--seeds", "[1, 2]"]).status.success());
    assert!(run_short(b.path(), &["--seeds", "[1, 2]"]).status.success());
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn policy_disabled_gives_identical_arms() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_short(dir.path(), &["--policy-disabled"]).status.success());
    let a = fs::read(dir.path().join("trace_minos_seed1.csv")).unwrap();
    let b = fs::read(dir.path().join("trace_baseline_seed1.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn env_var_sets_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_minos"))
        .args(["run", "--workload.duration_ms", "30000"])
        .env("MINOS_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let out = minos(&["run", "--policy.retry_cap", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy.retry_cap"));

    let out = minos(&["pretest", "--platform.perf_distribution.kind", "weibull"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["constant", "uniform", "lognormal"] {
        assert!(err.contains(name), "{err}");
    }

    let out = minos(&["pretest", "--config", "/nonexistent/minos.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

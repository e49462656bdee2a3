use std::fs;

use minos_core::cost::{Classification, Outcome};
use minos_core::experiment::{pretest, seed_file_names};
use minos_core::reporting::{read_trace_csv, summarize_run, verify_trace};
use minos_core::simulation::RunOutput;
use minos_core::workload::run_pretest;
use minos_core::*;

fn short_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.workload.duration_ms = 300_000;
    c
}

#[test]
fn one_seed_writes_six_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = short_config();
    run_experiment(&c, dir.path(), false).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected: Vec<String> = seed_file_names(1).to_vec();
    expected.push("comparison.csv".into());
    expected.sort();
    assert_eq!(names, expected);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let mut c = short_config();
    c.seeds = vec![3, 1, 2];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&c, a.path(), false).unwrap();
    run_experiment(&c, b.path(), false).unwrap();
    let mut files = 0;
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name:?}");
        files += 1;
    }
    assert_eq!(files, 3 * 5 + 1);
    let comparison = fs::read_to_string(a.path().join("comparison.csv")).unwrap();
    let seeds: Vec<&str> = comparison.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["3", "1", "2"]);
}

#[test]
fn disabled_policy_gives_zero_deltas() {
    let r = run_seed(&short_config(), 4, true).unwrap();
    let c = &r.comparison;
    assert_eq!(r.minos.trace, r.baseline.trace);
    assert_eq!(c.compute_speedup_pct, 0.0);
    assert_eq!(c.success_delta_pct, 0.0);
    assert_eq!(c.cost_delta_pct, 0.0);
    assert_eq!(c.fraction_of_time_cheaper, 0.5);
    assert_eq!(c.crossover_time_ms, None);
}

#[test]
fn fraction_cheaper_matches_recount() {
    let r = run_seed(&short_config(), 2, false).unwrap();
    let b = &r.baseline_summary.cost_per_success_series;
    let m = &r.minos_summary.cost_per_success_series;
    let (mut score, mut n) = (0.0, 0);
    for i in 0..b.len() {
        if let (Some(x), Some(y)) = (b[i], m[i]) {
            n += 1;
            if y < x {
                score += 1.0;
            } else if y == x {
                score += 0.5;
            }
        }
    }
    assert_eq!(r.comparison.fraction_of_time_cheaper, score / n as f64);
}

fn completed(run: &RunOutput) -> Vec<&minos_core::cost::AttemptRecord> {
    run.trace.iter().filter(|a| a.outcome == Outcome::Completed).collect()
}

#[test]
fn summary_is_a_function_of_the_trace() {
    let c = short_config();
    let r = run_seed(&c, 5, false).unwrap();
    let s = &r.minos_summary;
    assert_eq!(s.successful_requests as usize, completed(&r.minos).len());
    let terminations: u64 = s.retry_histogram.iter().enumerate().map(|(k, n)| k as u64 * n).sum();
    assert_eq!(terminations, s.termination_count);
    assert_eq!(s.cost, cost::total_cost(&r.minos.trace, &c.cost).unwrap());

    let again = summarize_run(&r.minos, s.threshold_ms, &c.digest(), &c.cost, c.sample_period_ms).unwrap();
    assert_eq!(serde_json::to_vec(s).unwrap(), serde_json::to_vec(&again).unwrap());

    let mut e2e: Vec<u64> = completed(&r.minos)
        .iter()
        .map(|a| a.completed_at.unwrap() - a.submitted_at)
        .collect();
    e2e.sort_unstable();
    assert_eq!(s.median_end_to_end_ms, e2e[e2e.len().div_ceil(2) - 1]);
}

#[test]
fn written_trace_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let c = short_config();
    let results = run_experiment(&c, dir.path(), false).unwrap();
    let [tm, _, sm, ..] = seed_file_names(1);
    let trace = read_trace_csv(fs::File::open(dir.path().join(tm)).unwrap()).unwrap();
    assert_eq!(trace, results[0].minos.trace);
    let summary: RunSummary = serde_json::from_slice(&fs::read(dir.path().join(sm)).unwrap()).unwrap();
    let report = verify_trace(&trace, c.policy.retry_cap, &c.cost, Some(&summary)).unwrap();
    assert_eq!(report.total_cost_nanos, summary.cost.total_cost_nanos);

    let mut tampered = trace.clone();
    let i = tampered.iter().position(|a| a.classification == Classification::Terminated).unwrap();
    tampered[i].billed_ms += 1;
    assert!(verify_trace(&tampered, c.policy.retry_cap, &c.cost, Some(&summary)).is_err());
}

#[test]
fn pretest_with_ten_users_for_one_minute() {
    let c = ExperimentConfig::default();
    let scores = run_pretest(&c.platform, &c.policy, &c.workload, &c.function, 1).unwrap();
    // 10 users, one minute: every user starts one instance and keeps it warm
    assert_eq!(scores.len(), c.workload.pretest_vu_count as usize);
    let out = pretest(&c, 1).unwrap();
    let passing = out.scores.iter().filter(|&&s| s <= out.threshold.value).count();
    assert_eq!(passing, 4);
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let raw = "[policy]\nretry_cap = 0\n[workload]\nvu_count = 0\n";
    match validate_config(raw) {
        Err(ConfigError::Invalid(issues)) => {
            let keys: Vec<_> = issues.iter().map(|i| i.key.as_str()).collect();
            assert_eq!(keys, ["policy.retry_cap", "workload.vu_count"]);
        }
        other => panic!("{other:?}"),
    }
}

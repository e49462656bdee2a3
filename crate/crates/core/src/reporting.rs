//! Post-hoc metrics over run traces and the CSV/JSON files they are written to.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cost::{self, AttemptRecord, Classification, CostParams, CostReport, Outcome};
use crate::error::ReportError;
use crate::platform::{InvocationId, NodeId};
use crate::policy::PolicyMode;
use crate::sim_core::Millis;
use crate::simulation::RunOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: PolicyMode,
    pub seed: u64,
    /// Digest of the platform, workload, function and cost settings.
    pub config_digest: String,
    pub threshold_ms: Option<f64>,
    pub duration_ms: Millis,
    pub submitted: u64,
    pub successful_requests: u64,
    pub incomplete: u64,
    pub mean_compute_ms: f64,
    pub median_compute_ms: u64,
    pub mean_prepare_ms: f64,
    pub mean_end_to_end_ms: f64,
    pub median_end_to_end_ms: u64,
    pub cold_starts: u64,
    pub benchmarks: u64,
    pub termination_count: u64,
    pub exempt_count: u64,
    /// Entry `k` counts invocations that were re-queued `k` times.
    pub retry_histogram: Vec<u64>,
    pub cost: CostReport,
    pub sample_period_ms: Millis,
    /// Cumulative cost per million successful requests at the end of each
    /// sample period; `None` before the first success.
    pub cost_per_success_series: Vec<Option<f64>>,
}

/// Nearest-rank median (the `ceil(n/2)`-th smallest value).
pub fn median(values: &[u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Some(v[v.len().div_ceil(2) - 1])
}

fn mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<u64>() as f64 / values.len() as f64
    }
}

/// Aggregate statistics of one run, computed only from its trace.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    trace: &[AttemptRecord],
    submitted: u64,
    mode: PolicyMode,
    seed: u64,
    duration_ms: Millis,
    threshold_ms: Option<f64>,
    config_digest: &str,
    params: &CostParams,
    sample_period_ms: Millis,
) -> Result<RunSummary, ReportError> {
    if trace.is_empty() {
        return Err(ReportError::EmptyTrace);
    }
    let completed: Vec<&AttemptRecord> = trace.iter().filter(|a| a.outcome == Outcome::Completed).collect();
    let compute: Vec<u64> = completed.iter().map(|a| a.compute_ms).collect();
    let prepare: Vec<u64> = completed.iter().map(|a| a.prepare_ms).collect();
    let e2e: Vec<u64> = completed
        .iter()
        .map(|a| a.completed_at.expect("completed") - a.submitted_at)
        .collect();

    let mut terminations: BTreeMap<InvocationId, u64> = BTreeMap::new();
    for a in trace {
        let t = terminations.entry(a.invocation_id).or_default();
        if a.classification == Classification::Terminated {
            *t += 1;
        }
    }
    let mut retry_histogram = vec![0u64; 1 + terminations.values().copied().max().unwrap_or(0) as usize];
    for &k in terminations.values() {
        retry_histogram[k as usize] += 1;
    }

    let cost = cost::total_cost(trace, params)?;
    let cost_per_success_series = cost_series(trace, params, duration_ms, sample_period_ms);
    Ok(RunSummary {
        mode,
        seed,
        config_digest: config_digest.to_string(),
        threshold_ms,
        duration_ms,
        submitted,
        successful_requests: completed.len() as u64,
        incomplete: submitted - completed.len() as u64,
        mean_compute_ms: mean(&compute),
        median_compute_ms: median(&compute).unwrap_or(0),
        mean_prepare_ms: mean(&prepare),
        mean_end_to_end_ms: mean(&e2e),
        median_end_to_end_ms: median(&e2e).unwrap_or(0),
        cold_starts: trace.iter().filter(|a| a.classification != Classification::WarmReuse).count() as u64,
        benchmarks: trace.iter().filter(|a| a.benchmark_score.is_some()).count() as u64,
        termination_count: cost.n_term,
        exempt_count: trace.iter().filter(|a| a.exempt).count() as u64,
        retry_histogram,
        cost,
        sample_period_ms,
        cost_per_success_series,
    })
}

/// Convenience wrapper over [`summarize`] for a finished run.
pub fn summarize_run(
    run: &RunOutput,
    threshold_ms: Option<f64>,
    config_digest: &str,
    params: &CostParams,
    sample_period_ms: Millis,
) -> Result<RunSummary, ReportError> {
    summarize(
        &run.trace,
        run.counters.submitted,
        run.mode,
        run.seed,
        run.duration_ms,
        threshold_ms,
        config_digest,
        params,
        sample_period_ms,
    )
}

/// Cumulative cost per million successes sampled every `period` ms. Attempt
/// cost is booked when the attempt ends.
pub fn cost_series(trace: &[AttemptRecord], params: &CostParams, duration_ms: Millis, period: Millis) -> Vec<Option<f64>> {
    let samples = (duration_ms / period) as usize;
    let mut cost_at = vec![0u64; samples + 1];
    let mut succ_at = vec![0u64; samples + 1];
    let bucket = |t: Millis| (t.div_ceil(period) as usize).min(samples);
    for a in trace {
        cost_at[bucket(a.ended_at)] += a.billed_ms * params.c_exec_nanos_per_ms + params.c_inv_nanos;
        if let Some(c) = a.completed_at {
            succ_at[bucket(c)] += 1;
        }
    }
    let (mut cost, mut succ) = (0u64, 0u64);
    let mut out = Vec::with_capacity(samples);
    for i in 0..=samples {
        cost += cost_at[i];
        succ += succ_at[i];
        if i > 0 {
            out.push((succ > 0).then(|| cost as f64 / cost::NANOS_PER_UNIT / succ as f64 * 1e6));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub baseline_mean_compute_ms: f64,
    pub minos_mean_compute_ms: f64,
    pub compute_speedup_pct: f64,
    pub baseline_successful: u64,
    pub minos_successful: u64,
    pub success_delta_pct: f64,
    pub baseline_cost_per_million: f64,
    pub minos_cost_per_million: f64,
    pub cost_delta_pct: f64,
    pub crossover_time_ms: Option<Millis>,
    pub fraction_of_time_cheaper: f64,
}

/// Crossover instant and fraction of samples in which the second series is
/// cheaper (ties count half). Samples where either series is undefined are
/// skipped.
pub fn series_metrics(baseline: &[Option<f64>], minos: &[Option<f64>], period: Millis) -> (Option<Millis>, f64) {
    let pairs: Vec<(usize, f64, f64)> = baseline
        .iter()
        .zip(minos)
        .enumerate()
        .filter_map(|(i, (b, m))| Some((i, (*b)?, (*m)?)))
        .collect();
    if pairs.is_empty() {
        return (None, 0.5);
    }
    let score: f64 = pairs
        .iter()
        .map(|&(_, b, m)| if m < b { 1.0 } else if m == b { 0.5 } else { 0.0 })
        .sum();
    let fraction = score / pairs.len() as f64;
    // first sample of the final run where minos stays strictly cheaper
    let mut crossover = None;
    for &(i, b, m) in pairs.iter().rev() {
        if m < b {
            crossover = Some((i as Millis + 1) * period);
        } else {
            break;
        }
    }
    (crossover, fraction)
}

/// Element-wise mean over series; a sample is defined only when every
/// series defines it.
pub fn mean_series(series: &[&[Option<f64>]]) -> Vec<Option<f64>> {
    let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Option<Vec<f64>> = series.iter().map(|s| s[i]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn pct_change(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        (to - from) / from * 100.0
    }
}

/// Relative reduction from `from` to `to`, in percent.
fn speedup_pct(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        (from - to) / from * 100.0
    }
}

/// Paired comparison of a baseline and a policy run with the same seed and
/// configuration.
pub fn compare(baseline: &RunSummary, minos: &RunSummary) -> Result<ComparisonReport, ReportError> {
    if baseline.seed != minos.seed {
        return Err(ReportError::Mismatch(format!("seeds {} vs {}", baseline.seed, minos.seed)));
    }
    if baseline.config_digest != minos.config_digest {
        return Err(ReportError::Mismatch("platform/workload configuration differs".into()));
    }
    if baseline.sample_period_ms != minos.sample_period_ms {
        return Err(ReportError::Mismatch("sample periods differ".into()));
    }
    let b_cost = cost::cost_per_million_successful(&baseline.cost)?;
    let m_cost = cost::cost_per_million_successful(&minos.cost)?;
    let (crossover_time_ms, fraction_of_time_cheaper) = series_metrics(
        &baseline.cost_per_success_series,
        &minos.cost_per_success_series,
        baseline.sample_period_ms,
    );
    Ok(ComparisonReport {
        seed: baseline.seed,
        baseline_mean_compute_ms: baseline.mean_compute_ms,
        minos_mean_compute_ms: minos.mean_compute_ms,
        compute_speedup_pct: speedup_pct(baseline.mean_compute_ms, minos.mean_compute_ms),
        baseline_successful: baseline.successful_requests,
        minos_successful: minos.successful_requests,
        success_delta_pct: pct_change(baseline.successful_requests as f64, minos.successful_requests as f64),
        baseline_cost_per_million: b_cost,
        minos_cost_per_million: m_cost,
        cost_delta_pct: pct_change(b_cost, m_cost),
        crossover_time_ms,
        fraction_of_time_cheaper,
    })
}

/// Flat CSV row for one attempt. Column order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    invocation_id: u64,
    vu_id: u32,
    attempt_index: u32,
    classification: Classification,
    node_id: u32,
    perf_factor: f64,
    prepare_ms: Millis,
    benchmark_ms: Millis,
    benchmark_score: Option<f64>,
    compute_ms: Millis,
    billed_ms: Millis,
    submitted_at: Millis,
    completed_at: Option<Millis>,
    instance_id: u64,
    outcome: Outcome,
    exempt: bool,
    started_at: Millis,
    ended_at: Millis,
}

impl From<&AttemptRecord> for TraceRow {
    fn from(a: &AttemptRecord) -> Self {
        Self {
            invocation_id: a.invocation_id.0,
            vu_id: a.vu_id,
            attempt_index: a.attempt_index,
            classification: a.classification,
            node_id: a.node_id.0,
            perf_factor: a.perf_factor,
            prepare_ms: a.prepare_ms,
            benchmark_ms: a.benchmark_ms,
            benchmark_score: a.benchmark_score,
            compute_ms: a.compute_ms,
            billed_ms: a.billed_ms,
            submitted_at: a.submitted_at,
            completed_at: a.completed_at,
            instance_id: a.instance_id,
            outcome: a.outcome,
            exempt: a.exempt,
            started_at: a.started_at,
            ended_at: a.ended_at,
        }
    }
}

impl From<TraceRow> for AttemptRecord {
    fn from(r: TraceRow) -> Self {
        Self {
            invocation_id: InvocationId(r.invocation_id),
            vu_id: r.vu_id,
            attempt_index: r.attempt_index,
            classification: r.classification,
            outcome: r.outcome,
            exempt: r.exempt,
            node_id: NodeId(r.node_id),
            instance_id: r.instance_id,
            perf_factor: r.perf_factor,
            prepare_ms: r.prepare_ms,
            benchmark_ms: r.benchmark_ms,
            benchmark_score: r.benchmark_score,
            compute_ms: r.compute_ms,
            billed_ms: r.billed_ms,
            submitted_at: r.submitted_at,
            started_at: r.started_at,
            ended_at: r.ended_at,
            completed_at: r.completed_at,
        }
    }
}

pub fn write_trace_csv<W: Write>(writer: W, trace: &[AttemptRecord]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(writer);
    for a in trace {
        w.serialize(TraceRow::from(a))?;
    }
    if trace.is_empty() {
        // keep the header even for empty traces
        w.write_record(TRACE_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub const TRACE_COLUMNS: [&str; 18] = [
    "invocation_id",
    "vu_id",
    "attempt_index",
    "classification",
    "node_id",
    "perf_factor",
    "prepare_ms",
    "benchmark_ms",
    "benchmark_score",
    "compute_ms",
    "billed_ms",
    "submitted_at",
    "completed_at",
    "instance_id",
    "outcome",
    "exempt",
    "started_at",
    "ended_at",
];

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<AttemptRecord>, ReportError> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize::<TraceRow>()
        .map(|row| Ok(AttemptRecord::from(row?)))
        .collect()
}

pub fn write_comparison_csv<W: Write>(writer: W, rows: &[ComparisonReport]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timeseries_csv<W: Write>(
    writer: W,
    period_ms: Millis,
    baseline: &[Option<f64>],
    minos: &[Option<f64>],
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_sec", "baseline_cost_per_success", "minos_cost_per_success"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, (b, m)) in baseline.iter().zip(minos).enumerate() {
        let t = (i as u64 + 1) * period_ms;
        let t_sec = if t.is_multiple_of(1000) {
            (t / 1000).to_string()
        } else {
            (t as f64 / 1000.0).to_string()
        };
        w.write_record([t_sec, fmt(*b), fmt(*m)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub attempts: u64,
    pub invocations: u64,
    pub completed: u64,
    pub terminated: u64,
    pub exempt: u64,
    pub total_cost_nanos: u64,
}

/// Re-check the run invariants on a trace, independently of the simulator.
///
/// With a summary, the summary's cost totals and success counts must match a
/// brute-force re-summation of the trace.
pub fn verify_trace(
    trace: &[AttemptRecord],
    retry_cap: u32,
    params: &CostParams,
    summary: Option<&RunSummary>,
) -> Result<VerifyReport, ReportError> {
    let mut problems = Vec::new();
    let mut report = VerifyReport {
        attempts: trace.len() as u64,
        ..Default::default()
    };
    let mut by_invocation: BTreeMap<u64, Vec<&AttemptRecord>> = BTreeMap::new();

    for a in trace {
        let tag = format!("invocation {} attempt {}", a.invocation_id, a.attempt_index);
        let parallel = a.prepare_ms.max(a.benchmark_ms);
        let expected = match a.classification {
            Classification::Terminated => parallel,
            Classification::PassedColdStart => parallel + a.compute_ms,
            Classification::WarmReuse => a.prepare_ms + a.compute_ms,
        };
        if a.billed_ms != expected {
            problems.push(format!("{tag}: billed {} != phase sum {expected}", a.billed_ms));
        }
        if a.ended_at < a.started_at || a.ended_at - a.started_at != a.billed_ms {
            problems.push(format!("{tag}: billed {} != wall time {}", a.billed_ms, a.ended_at.saturating_sub(a.started_at)));
        }
        if a.started_at < a.submitted_at {
            problems.push(format!("{tag}: started before submission"));
        }
        match a.classification {
            Classification::Terminated => {
                report.terminated += 1;
                if a.compute_ms != 0 || a.outcome != Outcome::Crashed || a.benchmark_score.is_none() {
                    problems.push(format!("{tag}: terminated attempt must crash after a benchmark with no compute"));
                }
            }
            Classification::WarmReuse => {
                if a.benchmark_ms != 0 || a.benchmark_score.is_some() {
                    problems.push(format!("{tag}: warm reuse ran a benchmark"));
                }
            }
            Classification::PassedColdStart => {}
        }
        if a.outcome == Outcome::Crashed && a.classification != Classification::Terminated {
            problems.push(format!("{tag}: crashed attempt not classified as terminated"));
        }
        if a.attempt_index > retry_cap {
            problems.push(format!("{tag}: attempt index exceeds retry cap {retry_cap}"));
        }
        if a.exempt {
            report.exempt += 1;
            if a.attempt_index != retry_cap || a.benchmark_score.is_some() {
                problems.push(format!("{tag}: exempt attempt must be at the retry cap without a benchmark"));
            }
        }
        match (a.outcome, a.completed_at) {
            (Outcome::Completed, Some(c)) => {
                report.completed += 1;
                if c < a.submitted_at || c != a.ended_at {
                    problems.push(format!("{tag}: inconsistent completion time {c}"));
                }
            }
            (Outcome::Completed, None) => problems.push(format!("{tag}: completed without timestamp")),
            (_, Some(_)) => problems.push(format!("{tag}: completion timestamp on unfinished attempt")),
            _ => {}
        }
        if a.outcome == Outcome::InFlight {
            problems.push(format!("{tag}: in-flight attempt in a finished trace"));
        }
        report.total_cost_nanos += a.billed_ms * params.c_exec_nanos_per_ms + params.c_inv_nanos;
        by_invocation.entry(a.invocation_id.0).or_default().push(a);
    }
    report.invocations = by_invocation.len() as u64;

    let mut windows: BTreeMap<u32, Vec<(Millis, Millis, u64)>> = BTreeMap::new();
    for (id, attempts) in &by_invocation {
        let mut sorted = attempts.clone();
        sorted.sort_by_key(|a| a.attempt_index);
        for (i, a) in sorted.iter().enumerate() {
            if a.attempt_index as usize != i {
                problems.push(format!("invocation {id}: attempt indices are not 0..n"));
                break;
            }
            if i + 1 < sorted.len() && a.outcome != Outcome::Crashed {
                problems.push(format!("invocation {id}: attempt {i} did not crash but was retried"));
            }
            if i > 0 && a.started_at < sorted[i - 1].ended_at {
                problems.push(format!("invocation {id}: attempts overlap"));
            }
        }
        let first = sorted[0];
        if sorted.iter().any(|a| a.vu_id != first.vu_id || a.submitted_at != first.submitted_at) {
            problems.push(format!("invocation {id}: attempts disagree on VU or submission time"));
        }
        let end = sorted.iter().map(|a| a.ended_at).max().unwrap_or(first.submitted_at);
        windows.entry(first.vu_id).or_default().push((first.submitted_at, end, *id));
    }
    for (vu, mut w) in windows {
        w.sort();
        for pair in w.windows(2) {
            if pair[1].0 < pair[0].1 {
                problems.push(format!(
                    "VU {vu}: invocations {} and {} overlap",
                    pair[0].2, pair[1].2
                ));
            }
        }
    }

    if let Some(s) = summary {
        if s.cost.total_cost_nanos != report.total_cost_nanos {
            problems.push(format!(
                "summary total cost {} != re-summed {}",
                s.cost.total_cost_nanos, report.total_cost_nanos
            ));
        }
        if s.successful_requests != report.completed {
            problems.push(format!(
                "summary successes {} != completed attempts {}",
                s.successful_requests, report.completed
            ));
        }
        if s.submitted != s.successful_requests + s.incomplete {
            problems.push("summary: submitted != successful + incomplete".into());
        }
        if report.invocations > s.submitted {
            problems.push("trace holds more invocations than were submitted".into());
        }
        if s.termination_count != report.terminated {
            problems.push("summary termination count disagrees with trace".into());
        }
    }

    if problems.is_empty() {
        Ok(report)
    } else {
        Err(ReportError::Verify(problems))
    }
}

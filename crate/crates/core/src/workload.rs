//! Closed-loop workload and the two-phase function body.
//!
//! Each virtual user sends one request, waits for it to complete, thinks for
//! `think_time_ms`, and sends the next. The function first runs a
//! network-bound prepare phase (unaffected by node speed) and then a
//! CPU-bound compute phase whose duration scales with `1 / perf_factor`.

use serde::{Deserialize, Serialize};

use crate::cost::Classification;
use crate::error::{ConfigIssue, SimError, StatsError};
use crate::platform::{Distribution, PlatformConfig};
use crate::policy::{BenchmarkResult, Decision, ElysiumThreshold, PolicyConfig, PolicyMode};
use crate::sim_core::Millis;
use crate::simulation::{simulate, RunSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub vu_count: u32,
    pub think_time_ms: Millis,
    pub duration_ms: Millis,
    pub pretest_vu_count: u32,
    pub pretest_duration_ms: Millis,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            vu_count: 10,
            think_time_ms: 1_000,
            duration_ms: 1_800_000,
            pretest_vu_count: 10,
            pretest_duration_ms: 60_000,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self, prefix: &str) -> Vec<ConfigIssue> {
        let checks = [
            ("vu_count", self.vu_count as u64),
            ("think_time_ms", self.think_time_ms),
            ("duration_ms", self.duration_ms),
            ("pretest_vu_count", self.pretest_vu_count as u64),
            ("pretest_duration_ms", self.pretest_duration_ms),
        ];
        checks
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| ConfigIssue::new(format!("{prefix}.{k}"), "must be > 0"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionProfile {
    /// Download time; independent of node speed.
    pub prepare_ms: Distribution,
    /// Compute time on a node with `perf_factor == 1.0`.
    pub compute_base_ms: f64,
    /// Benchmark time on a node with `perf_factor == 1.0`.
    pub benchmark_base_ms: f64,
}

impl Default for FunctionProfile {
    fn default() -> Self {
        Self {
            prepare_ms: Distribution::constant(400.0),
            compute_base_ms: 2_000.0,
            benchmark_base_ms: 300.0,
        }
    }
}

impl FunctionProfile {
    pub fn validate(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut issues = self.prepare_ms.validate(&format!("{prefix}.prepare_ms"), true);
        if !(self.compute_base_ms.is_finite() && self.compute_base_ms > 0.0) {
            issues.push(ConfigIssue::new(format!("{prefix}.compute_base_ms"), "must be > 0"));
        }
        if !(self.benchmark_base_ms.is_finite() && self.benchmark_base_ms > 0.0) {
            issues.push(ConfigIssue::new(format!("{prefix}.benchmark_base_ms"), "must be > 0"));
        }
        issues
    }

    pub fn compute_ms(&self, perf_factor: f64) -> Millis {
        (self.compute_base_ms / perf_factor).ceil() as Millis
    }
}

/// Next submission time of a virtual user whose request completed at
/// `completed_at`, or `None` once the experiment window has closed.
pub fn next_submission(completed_at: Millis, think_time_ms: Millis, duration_ms: Millis) -> Option<Millis> {
    let t = completed_at + think_time_ms;
    (t < duration_ms).then_some(t)
}

/// How an attempt begins on its instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttemptStart {
    Warm,
    /// Cold start without the policy: no benchmark.
    ColdUnjudged,
    Cold(Decision),
}

/// Phase layout of one attempt, relative to its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttemptPlan {
    pub classification: Classification,
    pub prepare_ms: Millis,
    pub benchmark_ms: Millis,
    pub compute_ms: Millis,
    /// Offset at which the benchmark verdict is known, if one runs.
    pub judge_at: Option<Millis>,
    /// Offset at which the attempt finishes (completes or crashes).
    pub end_at: Millis,
}

/// Lay out the phases of an attempt on an instance with `perf_factor`.
pub fn execute_attempt(start: AttemptStart, perf_factor: f64, prepare_ms: Millis, profile: &FunctionProfile) -> AttemptPlan {
    let compute_ms = profile.compute_ms(perf_factor);
    let sequential = |classification| AttemptPlan {
        classification,
        prepare_ms,
        benchmark_ms: 0,
        compute_ms,
        judge_at: None,
        end_at: prepare_ms + compute_ms,
    };
    match start {
        AttemptStart::Warm => sequential(Classification::WarmReuse),
        AttemptStart::ColdUnjudged | AttemptStart::Cold(Decision::ExemptPass) => sequential(Classification::PassedColdStart),
        AttemptStart::Cold(Decision::Pass { score }) => {
            let benchmark_ms = benchmark_duration(score);
            let parallel = prepare_ms.max(benchmark_ms);
            AttemptPlan {
                classification: Classification::PassedColdStart,
                prepare_ms,
                benchmark_ms,
                compute_ms,
                judge_at: Some(parallel),
                end_at: parallel + compute_ms,
            }
        }
        AttemptStart::Cold(Decision::Terminate { score }) => {
            let benchmark_ms = benchmark_duration(score);
            let parallel = prepare_ms.max(benchmark_ms);
            AttemptPlan {
                classification: Classification::Terminated,
                prepare_ms,
                benchmark_ms,
                compute_ms: 0,
                judge_at: Some(parallel),
                end_at: parallel,
            }
        }
    }
}

/// Wall time of a benchmark with the given score, whole ms.
pub fn benchmark_duration(score: f64) -> Millis {
    (score.ceil() as Millis).max(1)
}

/// Run the observe-only pre-test and return every benchmark it recorded.
///
/// Node speeds are shared with the main run (same seed); placement and noise
/// draws use separate streams.
pub fn run_pretest(
    platform: &PlatformConfig,
    policy: &PolicyConfig,
    workload: &WorkloadConfig,
    function: &FunctionProfile,
    seed: u64,
) -> Result<Vec<BenchmarkResult>, PretestError> {
    let spec = RunSpec {
        platform,
        policy,
        function,
        mode: PolicyMode::ObserveOnly,
        threshold: ElysiumThreshold::accept_all(),
        vu_count: workload.pretest_vu_count,
        think_time_ms: workload.think_time_ms,
        duration_ms: workload.pretest_duration_ms,
        seed,
        salt: PRETEST_SALT,
    };
    let out = simulate(&spec).map_err(PretestError::Sim)?;
    if out.benchmarks.is_empty() {
        return Err(PretestError::Stats(StatsError::Empty));
    }
    Ok(out.benchmarks)
}

pub const PRETEST_SALT: u64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PretestError {
    #[error(transparent)]
    Sim(SimError),
    #[error("pre-test collected no benchmark scores: {0}")]
    Stats(StatsError),
}

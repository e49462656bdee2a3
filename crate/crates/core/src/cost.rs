//! Billing model: per-millisecond execution cost plus a per-attempt
//! invocation fee, summed over terminated, passed and reused attempts.
//!
//! Currency is a fixed-point integer count of nano-units so that the totals
//! are exact and can be checked against an independent re-summation.

use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, ReportError};
use crate::platform::{InvocationId, NodeId};
use crate::sim_core::Millis;

/// Currency in nano-units (1e-9 of a currency unit).
pub type Nanos = u64;

pub const NANOS_PER_UNIT: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Price of one billed millisecond.
    pub c_exec_nanos_per_ms: Nanos,
    /// Price of one invocation attempt.
    pub c_inv_nanos: Nanos,
    pub memory_tier: String,
    /// Informational only; the speed model lives in the node perf factor.
    pub memory_mb: u32,
    pub vcpu: f64,
}

impl CostParams {
    /// Smallest memory tier: one invocation costs as much as 50 ms of execution.
    pub fn small_tier() -> Self {
        Self {
            c_exec_nanos_per_ms: 1_000,
            c_inv_nanos: 50_000,
            memory_tier: "small".into(),
            memory_mb: 256,
            vcpu: 0.167,
        }
    }

    /// Largest memory tier: one invocation costs as much as 3 ms of execution.
    pub fn large_tier() -> Self {
        Self {
            c_exec_nanos_per_ms: 1_000,
            c_inv_nanos: 3_000,
            memory_tier: "large".into(),
            memory_mb: 32_768,
            vcpu: 8.0,
        }
    }

    /// Invocation fee expressed in milliseconds of execution.
    pub fn invocation_equivalent_ms(&self) -> f64 {
        self.c_inv_nanos as f64 / self.c_exec_nanos_per_ms as f64
    }

    pub fn validate(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        if self.c_exec_nanos_per_ms == 0 {
            issues.push(ConfigIssue::new(format!("{prefix}.c_exec_nanos_per_ms"), "must be > 0"));
        }
        issues
    }
}

impl Default for CostParams {
    fn default() -> Self {
        Self::small_tier()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    /// Cold start that failed the benchmark (`d_term`).
    Terminated,
    /// Cold start that passed, was exempt, or ran without the policy (`d_pass`).
    PassedColdStart,
    /// Attempt served by an already warm instance (`d_reuse`).
    WarmReuse,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Terminated => "terminated",
            Classification::PassedColdStart => "passed_cold_start",
            Classification::WarmReuse => "warm_reuse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Crashed,
    /// Still running when the experiment ended; billed up to the cutoff.
    Cutoff,
    InFlight,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Crashed => "crashed",
            Outcome::Cutoff => "cutoff",
            Outcome::InFlight => "in_flight",
        }
    }
}

/// One attempt of one invocation on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub invocation_id: InvocationId,
    pub vu_id: u32,
    pub attempt_index: u32,
    pub classification: Classification,
    pub outcome: Outcome,
    /// Accepted via the retry cap without a benchmark.
    pub exempt: bool,
    pub node_id: NodeId,
    pub instance_id: u64,
    pub perf_factor: f64,
    pub prepare_ms: Millis,
    pub benchmark_ms: Millis,
    pub benchmark_score: Option<f64>,
    pub compute_ms: Millis,
    pub billed_ms: Millis,
    pub submitted_at: Millis,
    pub started_at: Millis,
    pub ended_at: Millis,
    pub completed_at: Option<Millis>,
}

/// Billed duration of a finished attempt.
///
/// Cold starts run prepare and benchmark in parallel, so they are billed for
/// the longer of the two; terminated attempts stop right there.
pub fn billed_ms(attempt: &AttemptRecord) -> Result<Millis, ReportError> {
    if attempt.outcome == Outcome::InFlight {
        return Err(ReportError::InFlight {
            invocation_id: attempt.invocation_id.0,
            attempt_index: attempt.attempt_index,
        });
    }
    let parallel = attempt.prepare_ms.max(attempt.benchmark_ms);
    Ok(match attempt.classification {
        Classification::Terminated => parallel,
        Classification::PassedColdStart => parallel + attempt.compute_ms,
        Classification::WarmReuse => attempt.prepare_ms + attempt.compute_ms,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_term: u64,
    pub n_pass: u64,
    pub n_reuse: u64,
    pub ms_term: u64,
    pub ms_pass: u64,
    pub ms_reuse: u64,
    pub exec_cost_nanos: Nanos,
    pub invocation_cost_nanos: Nanos,
    pub total_cost_nanos: Nanos,
    pub successful: u64,
    pub cost_per_million_successful: Option<f64>,
}

impl CostReport {
    pub fn attempts(&self) -> u64 {
        self.n_term + self.n_pass + self.n_reuse
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost_nanos as f64 / NANOS_PER_UNIT
    }
}

/// Evaluate the cost equation over a set of finished attempts.
pub fn total_cost<'a, I>(attempts: I, params: &CostParams) -> Result<CostReport, ReportError>
where
    I: IntoIterator<Item = &'a AttemptRecord>,
{
    let mut r = CostReport::default();
    for a in attempts {
        let ms = billed_ms(a)?;
        match a.classification {
            Classification::Terminated => {
                r.n_term += 1;
                r.ms_term += ms;
            }
            Classification::PassedColdStart => {
                r.n_pass += 1;
                r.ms_pass += ms;
            }
            Classification::WarmReuse => {
                r.n_reuse += 1;
                r.ms_reuse += ms;
            }
        }
        if a.outcome == Outcome::Completed {
            r.successful += 1;
        }
    }
    r.exec_cost_nanos = params.c_exec_nanos_per_ms * (r.ms_term + r.ms_pass + r.ms_reuse);
    r.invocation_cost_nanos = params.c_inv_nanos * r.attempts();
    r.total_cost_nanos = r.exec_cost_nanos + r.invocation_cost_nanos;
    r.cost_per_million_successful = cost_per_million_successful(&r).ok();
    Ok(r)
}

/// Total cost (terminated attempts included) per million completed
/// invocations, in currency units.
pub fn cost_per_million_successful(report: &CostReport) -> Result<f64, ReportError> {
    if report.successful == 0 {
        return Err(ReportError::NoSuccesses);
    }
    Ok(report.total_cost_nanos as f64 / NANOS_PER_UNIT / report.successful as f64 * 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn attempt(
        classification: Classification,
        prepare: Millis,
        bench: Millis,
        compute: Millis,
    ) -> AttemptRecord {
        let outcome = if classification == Classification::Terminated {
            Outcome::Crashed
        } else {
            Outcome::Completed
        };
        let mut a = AttemptRecord {
            invocation_id: InvocationId(0),
            vu_id: 0,
            attempt_index: 0,
            classification,
            outcome,
            exempt: false,
            node_id: NodeId(0),
            instance_id: 0,
            perf_factor: 1.0,
            prepare_ms: prepare,
            benchmark_ms: bench,
            benchmark_score: None,
            compute_ms: compute,
            billed_ms: 0,
            submitted_at: 0,
            started_at: 0,
            ended_at: 0,
            completed_at: None,
        };
        a.billed_ms = billed_ms(&a).unwrap();
        a
    }

    fn unit_params(c_inv: Nanos) -> CostParams {
        CostParams {
            c_exec_nanos_per_ms: 1,
            c_inv_nanos: c_inv,
            ..CostParams::default()
        }
    }

    #[test]
    fn billing_rules() {
        assert_eq!(attempt(Classification::PassedColdStart, 400, 300, 2000).billed_ms, 2400);
        assert_eq!(attempt(Classification::Terminated, 400, 300, 0).billed_ms, 400);
        assert_eq!(attempt(Classification::WarmReuse, 400, 0, 2000).billed_ms, 2400);
        // benchmark longer than prepare: the attempt waits on it
        assert_eq!(attempt(Classification::PassedColdStart, 400, 650, 2000).billed_ms, 2650);
    }

    #[test]
    fn in_flight_cannot_be_billed() {
        let mut a = attempt(Classification::WarmReuse, 400, 0, 2000);
        a.outcome = Outcome::InFlight;
        assert!(matches!(billed_ms(&a), Err(ReportError::InFlight { .. })));
    }

    #[test]
    fn empty_sum_is_zero() {
        let r = total_cost(&[], &CostParams::default()).unwrap();
        assert_eq!(r.total_cost_nanos, 0);
        assert!(cost_per_million_successful(&r).is_err());
    }

    #[test]
    fn hand_evaluated_equation() {
        let attempts = [
            attempt(Classification::Terminated, 400, 300, 0),
            attempt(Classification::PassedColdStart, 400, 300, 2000),
        ];
        let r = total_cost(&attempts, &unit_params(50)).unwrap();
        assert_eq!(r.exec_cost_nanos, 2800);
        assert_eq!(r.invocation_cost_nanos, 100);
        assert_eq!(r.total_cost_nanos, 2900);
        assert_eq!((r.n_term, r.n_pass, r.n_reuse), (1, 1, 0));
    }

    #[test]
    fn invocation_fee_negligible_for_long_functions() {
        let p = CostParams::small_tier();
        let r = total_cost(&[attempt(Classification::WarmReuse, 400, 0, 100_000)], &p).unwrap();
        let share = r.invocation_cost_nanos as f64 / r.total_cost_nanos as f64;
        assert!(share < 0.001, "share {share}");
    }

    #[test]
    fn tier_relations() {
        assert_eq!(CostParams::small_tier().invocation_equivalent_ms(), 50.0);
        assert_eq!(CostParams::large_tier().invocation_equivalent_ms(), 3.0);
    }

    #[test]
    fn baseline_cost_per_million_is_mean_attempt_cost() {
        let attempts: Vec<_> = (0..4)
            .map(|i| attempt(Classification::WarmReuse, 400, 0, 2000 + 100 * i))
            .collect();
        let p = CostParams::small_tier();
        let r = total_cost(&attempts, &p).unwrap();
        let mean_attempt = attempts
            .iter()
            .map(|a| (a.billed_ms * p.c_exec_nanos_per_ms + p.c_inv_nanos) as f64)
            .sum::<f64>()
            / 4.0
            / NANOS_PER_UNIT;
        assert!((cost_per_million_successful(&r).unwrap() - 1e6 * mean_attempt).abs() < 1e-9);
    }

    fn arb_attempt() -> impl Strategy<Value = AttemptRecord> {
        (0..3u8, 1..1000u64, 0..1000u64, 0..5000u64).prop_map(|(c, p, b, x)| match c {
            0 => attempt(Classification::Terminated, p, b, 0),
            1 => attempt(Classification::PassedColdStart, p, b, x),
            _ => attempt(Classification::WarmReuse, p, 0, x),
        })
    }

    proptest! {
        #[test]
        fn equation_matches_resummation(attempts in prop::collection::vec(arb_attempt(), 0..60), c_exec in 1..5000u64, c_inv in 0..100_000u64) {
            let p = CostParams { c_exec_nanos_per_ms: c_exec, c_inv_nanos: c_inv, ..CostParams::default() };
            let r = total_cost(&attempts, &p).unwrap();
            let brute: u64 = attempts.iter().map(|a| a.billed_ms * c_exec + c_inv).sum();
            prop_assert_eq!(r.total_cost_nanos, brute);
        }

        #[test]
        fn adding_an_attempt_never_lowers_cost(mut attempts in prop::collection::vec(arb_attempt(), 0..30), extra in arb_attempt()) {
            let p = CostParams::default();
            let before = total_cost(&attempts, &p).unwrap().total_cost_nanos;
            attempts.push(extra);
            prop_assert!(total_cost(&attempts, &p).unwrap().total_cost_nanos >= before);
        }
    }
}

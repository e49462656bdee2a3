//! Cold-start instance selection.
//!
//! A freshly started instance runs a short CPU benchmark alongside the
//! network-bound prepare phase and compares its score against the elysium
//! threshold. Slow instances re-queue their invocation and crash; invocations
//! that have already been re-queued `retry_cap` times skip the benchmark and
//! accept whatever instance they land on.

pub mod p2;
pub mod welford;

pub use p2::P2State;
pub use welford::WelfordState;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::platform::{Invocation, InvocationId, InstanceId};
use crate::sim_core::Millis;

/// Benchmark score an instance must match or beat (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElysiumThreshold {
    pub value: f64,
    pub target_pass_fraction: f64,
}

impl ElysiumThreshold {
    pub fn new(value: f64, target_pass_fraction: f64) -> Self {
        Self {
            value,
            target_pass_fraction,
        }
    }

    /// Threshold that every finite score passes.
    pub fn accept_all() -> Self {
        Self {
            value: f64::INFINITY,
            target_pass_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub instance_id: InstanceId,
    /// Milliseconds to finish the fixed benchmark workload.
    pub score: f64,
    pub measured_at: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Fixed,
    #[serde(rename = "pretest")]
    PreTest,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutageWindow {
    pub start_ms: Millis,
    pub end_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub enabled: bool,
    pub retry_cap: u32,
    /// Fraction of cold starts that should pass the benchmark.
    pub pass_fraction: f64,
    /// Relative standard deviation of the multiplicative benchmark noise.
    pub benchmark_noise_sigma: f64,
    pub threshold_mode: ThresholdMode,
    /// Threshold for `fixed` mode; initial threshold for `online` mode
    /// (absent means accept everything until the first update).
    pub fixed_threshold_ms: Option<f64>,
    /// Recalculation period of the online threshold.
    pub online_tick_ms: Millis,
    /// Window during which the online collector is unreachable.
    pub online_outage: Option<OutageWindow>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            retry_cap: 5,
            pass_fraction: 0.4,
            benchmark_noise_sigma: 0.05,
            threshold_mode: ThresholdMode::PreTest,
            fixed_threshold_ms: None,
            online_tick_ms: 30_000,
            online_outage: None,
        }
    }
}

/// How the policy behaves in a given run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// No benchmark, no termination (the baseline arm).
    Disabled,
    /// Benchmarks run and are recorded but nothing is terminated (pre-test).
    ObserveOnly,
    Enforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decision {
    Pass { score: f64 },
    Terminate { score: f64 },
    /// Retry cap reached: accepted without benchmarking.
    ExemptPass,
}

impl Decision {
    pub fn score(&self) -> Option<f64> {
        match *self {
            Decision::Pass { score } | Decision::Terminate { score } => Some(score),
            Decision::ExemptPass => None,
        }
    }
}

/// Pass iff `score <= threshold` (ties pass).
pub fn judge(result: &BenchmarkResult, threshold: &ElysiumThreshold) -> Verdict {
    if result.score <= threshold.value {
        Verdict::Pass
    } else {
        Verdict::Terminate
    }
}

/// Observed benchmark score on an instance with the given speed factor.
pub fn sample_benchmark_score<R: Rng + ?Sized>(
    benchmark_base_ms: f64,
    perf_factor: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> f64 {
    let noise = Normal::new(0.0, noise_sigma)
        .expect("noise sigma validated at config load")
        .sample(rng);
    (benchmark_base_ms / perf_factor * (1.0 + noise)).max(1e-6)
}

/// Decision for an invocation that triggered a cold start.
///
/// `score` is only drawn when the benchmark actually runs, so exempt
/// attempts leave the noise stream untouched.
pub fn on_cold_start<F>(
    invocation: &Invocation,
    instance_id: InstanceId,
    now: Millis,
    retry_cap: u32,
    threshold: &ElysiumThreshold,
    mode: PolicyMode,
    score: F,
) -> Decision
where
    F: FnOnce() -> f64,
{
    if mode == PolicyMode::Enforce && invocation.retry_count >= retry_cap {
        return Decision::ExemptPass;
    }
    let result = BenchmarkResult {
        instance_id,
        score: score(),
        measured_at: now,
    };
    match (mode, judge(&result, threshold)) {
        (PolicyMode::Enforce, Verdict::Terminate) => Decision::Terminate {
            score: result.score,
        },
        _ => Decision::Pass {
            score: result.score,
        },
    }
}

/// Bookkeeping for a failed attempt: bump the retry counter. The caller puts
/// the invocation back at the tail of the platform queue.
pub fn requeue(invocation: &mut Invocation, retry_cap: u32) -> InvocationId {
    debug_assert!(invocation.retry_count < retry_cap);
    invocation.retry_count += 1;
    invocation.id
}

/// Nearest-rank `q`-quantile of the scores: the smallest sample value such
/// that at least a fraction `q` of the samples are `<=` it.
pub fn nearest_rank(samples: &[f64], q: f64) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(StatsError::BadQuantile(q));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // tolerance absorbs products like 0.4 * 10 = 4.000000000000001
    let rank = ((q * sorted.len() as f64 - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Threshold from pre-test scores so that about `pass_fraction` of them pass.
pub fn calibrate_pretest(scores: &[f64], pass_fraction: f64) -> Result<ElysiumThreshold, StatsError> {
    let value = nearest_rank(scores, pass_fraction)?;
    Ok(ElysiumThreshold::new(value, pass_fraction))
}

/// Central collector for the online threshold mode.
///
/// Instances report scores as their benchmarks finish; every tick the
/// published threshold is replaced by the current streaming quantile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineEstimator {
    pub quantile: P2State,
    pub moments: WelfordState,
    pub updates: u64,
}

impl OnlineEstimator {
    pub fn new(pass_fraction: f64) -> Result<Self, StatsError> {
        Ok(Self {
            quantile: P2State::new(pass_fraction)?,
            moments: WelfordState::new(),
            updates: 0,
        })
    }

    pub fn observe(&mut self, score: f64) {
        self.quantile.update(score);
        self.moments.update(score);
    }

    pub fn observations(&self) -> u64 {
        self.quantile.count()
    }

    /// Threshold after a periodic recalculation; keeps `current` until five
    /// scores have been seen.
    pub fn online_threshold_tick(&mut self, current: ElysiumThreshold) -> ElysiumThreshold {
        match self.quantile.estimate() {
            Ok(value) => {
                self.updates += 1;
                ElysiumThreshold::new(value, self.quantile.quantile())
            }
            Err(_) => current,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_core::{rng_stream, StreamId};

    fn inv(retry_count: u32) -> Invocation {
        let mut i = Invocation::new(InvocationId(1), 0, 0, 0);
        i.retry_count = retry_count;
        i
    }

    fn result(score: f64) -> BenchmarkResult {
        BenchmarkResult {
            instance_id: InstanceId(0),
            score,
            measured_at: 0,
        }
    }

    #[test]
    fn judge_is_lower_is_better_and_ties_pass() {
        let t = ElysiumThreshold::new(100.0, 0.4);
        assert_eq!(judge(&result(80.0), &t), Verdict::Pass);
        assert_eq!(judge(&result(120.0), &t), Verdict::Terminate);
        assert_eq!(judge(&result(100.0), &t), Verdict::Pass);
        assert_eq!(judge(&result(1e300), &ElysiumThreshold::accept_all()), Verdict::Pass);
    }

    #[test]
    fn exempt_at_cap_skips_benchmark() {
        let t = ElysiumThreshold::new(100.0, 0.4);
        let d = on_cold_start(&inv(5), InstanceId(0), 0, 5, &t, PolicyMode::Enforce, || {
            panic!("benchmark must not run")
        });
        assert_eq!(d, Decision::ExemptPass);
    }

    #[test]
    fn slow_instance_terminates_and_requeues() {
        let t = ElysiumThreshold::new(100.0, 0.4);
        let mut i = inv(0);
        let d = on_cold_start(&i, InstanceId(0), 0, 5, &t, PolicyMode::Enforce, || 120.0);
        assert_eq!(d, Decision::Terminate { score: 120.0 });
        let id = requeue(&mut i, 5);
        assert_eq!(id, InvocationId(1));
        assert_eq!(i.retry_count, 1);
        let d = on_cold_start(&i, InstanceId(0), 0, 5, &t, PolicyMode::Enforce, || 80.0);
        assert_eq!(d, Decision::Pass { score: 80.0 });
    }

    #[test]
    fn observe_only_never_terminates() {
        let t = ElysiumThreshold::new(1.0, 0.4);
        let d = on_cold_start(&inv(9), InstanceId(0), 0, 5, &t, PolicyMode::ObserveOnly, || 500.0);
        assert_eq!(d, Decision::Pass { score: 500.0 });
    }

    #[test]
    fn nearest_rank_hand_example() {
        let t = calibrate_pretest(&[10.0, 20.0, 30.0, 40.0, 50.0], 0.4).unwrap();
        assert_eq!(t.value, 20.0);
        assert_eq!(nearest_rank(&[50.0, 10.0, 30.0], 1.0).unwrap(), 50.0);
        assert_eq!(nearest_rank(&[3.0], 0.01).unwrap(), 3.0);
        assert_eq!(calibrate_pretest(&[], 0.4), Err(StatsError::Empty));
        assert!(calibrate_pretest(&[1.0], 0.0).is_err());
    }

    #[test]
    fn nearest_rank_matches_brute_force() {
        let mut rng = rng_stream(5, StreamId::Aux, 0);
        let xs: Vec<f64> = (0..1000)
            .map(|_| sample_benchmark_score(300.0, 1.0, 0.2, &mut rng))
            .collect();
        let t = calibrate_pretest(&xs, 0.4).unwrap();
        // brute force: smallest sample with at least 40% of samples <= it
        let oracle = xs
            .iter()
            .copied()
            .filter(|&c| xs.iter().filter(|&&x| x <= c).count() * 10 >= xs.len() * 4)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(t.value, oracle);
    }

    #[test]
    fn score_model_without_noise_is_exact() {
        let mut rng = rng_stream(1, StreamId::BenchmarkNoise, 0);
        assert_eq!(sample_benchmark_score(300.0, 1.25, 0.0, &mut rng), 240.0);
    }

    #[test]
    fn online_keeps_initial_threshold_until_five_scores() {
        let mut est = OnlineEstimator::new(0.4).unwrap();
        let initial = ElysiumThreshold::new(123.0, 0.4);
        for s in [1.0, 2.0, 3.0, 4.0] {
            est.observe(s);
            assert_eq!(est.online_threshold_tick(initial), initial);
        }
        est.observe(5.0);
        assert_eq!(est.online_threshold_tick(initial).value, 3.0);
        assert_eq!(est.updates, 1);
    }
}

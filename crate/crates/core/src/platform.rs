//! FaaS platform model: worker nodes with a hidden speed factor, function
//! instances with a cold/warm lifecycle, and a FIFO invocation queue.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, SimError};
use crate::sim_core::{rng_stream, EventId, Millis, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InvocationId(pub u64);

impl fmt::Display for InvocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A named, parameterised distribution used for durations and speed factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Distribution {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    LogNormal { median: f64, sigma: f64 },
    Normal { mean: f64, sd: f64 },
    Exponential { mean: f64 },
}

impl Distribution {
    pub const NAMES: [&'static str; 5] = ["constant", "uniform", "lognormal", "normal", "exponential"];

    pub fn constant(value: f64) -> Self {
        Distribution::Constant { value }
    }

    pub fn lognormal(median: f64, sigma: f64) -> Self {
        Distribution::LogNormal { median, sigma }
    }

    /// Validation issues under `key`. With `strictly_positive`, every possible
    /// sample must be `> 0`; otherwise `>= 0`.
    pub fn validate(&self, key: &str, strictly_positive: bool) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        let mut bad = |field: &str, msg: &str| issues.push(ConfigIssue::new(format!("{key}.{field}"), msg));
        let lower_ok = |x: f64| if strictly_positive { x > 0.0 } else { x >= 0.0 };
        let bound = if strictly_positive { "must be > 0" } else { "must be >= 0" };
        match *self {
            Distribution::Constant { value } => {
                if !value.is_finite() || !lower_ok(value) {
                    bad("value", bound);
                }
            }
            Distribution::Uniform { low, high } => {
                if !low.is_finite() || !lower_ok(low) {
                    bad("low", bound);
                }
                if !high.is_finite() || high < low {
                    bad("high", "must be finite and >= low");
                }
            }
            Distribution::LogNormal { median, sigma } => {
                if !(median.is_finite() && median > 0.0) {
                    bad("median", "must be > 0");
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    bad("sigma", "must be >= 0");
                }
            }
            Distribution::Normal { .. } => {
                bad("kind", "normal can produce negative samples; use lognormal or uniform");
            }
            Distribution::Exponential { mean } => {
                if strictly_positive {
                    bad("kind", "exponential can produce zero; use lognormal or uniform");
                } else if !(mean.is_finite() && mean > 0.0) {
                    bad("mean", "must be > 0");
                }
            }
        }
        issues
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Constant { value } => value,
            Distribution::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
            Distribution::LogNormal { median, sigma } => {
                if sigma == 0.0 {
                    median
                } else {
                    LogNormal::new(median.ln(), sigma).expect("validated").sample(rng)
                }
            }
            Distribution::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            Distribution::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
        }
    }

    /// Sample rounded up to whole milliseconds, at least `floor`.
    pub fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R, floor: Millis) -> Millis {
        (self.sample(rng).max(0.0).ceil() as Millis).max(floor)
    }
}

/// Draw a node speed factor; always strictly positive.
pub fn sample_perf_factor<R: Rng + ?Sized>(dist: &Distribution, rng: &mut R) -> f64 {
    let f = dist.sample(rng);
    debug_assert!(f > 0.0, "perf factor must be positive, got {f}");
    f.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub node_pool_size: u32,
    /// Maximum concurrent instances of the function per node.
    pub node_capacity: u32,
    pub idle_timeout_ms: Millis,
    pub cold_start_delay_ms: Distribution,
    pub perf_distribution: Distribution,
}

/// Spread of the node speed factor in the default configuration.
pub const DEFAULT_PERF_SIGMA: f64 = 0.1;

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            node_pool_size: 500,
            node_capacity: 4,
            idle_timeout_ms: 600_000,
            cold_start_delay_ms: Distribution::constant(500.0),
            perf_distribution: Distribution::lognormal(1.0, DEFAULT_PERF_SIGMA),
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut issues = Vec::new();
        if self.node_pool_size == 0 {
            issues.push(ConfigIssue::new(format!("{prefix}.node_pool_size"), "must be >= 1"));
        }
        if self.node_capacity == 0 {
            issues.push(ConfigIssue::new(format!("{prefix}.node_capacity"), "must be >= 1"));
        }
        if self.idle_timeout_ms == 0 {
            issues.push(ConfigIssue::new(format!("{prefix}.idle_timeout_ms"), "must be > 0"));
        }
        issues.extend(self.cold_start_delay_ms.validate(&format!("{prefix}.cold_start_delay_ms"), false));
        issues.extend(self.perf_distribution.validate(&format!("{prefix}.perf_distribution"), true));
        issues
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNode {
    pub id: NodeId,
    pub perf_factor: f64,
    pub capacity: u32,
    pub live_instances: u32,
}

impl WorkerNode {
    pub fn has_spare_capacity(&self) -> bool {
        self.live_instances < self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    ColdStarting,
    Benchmarking,
    Busy,
    Warm,
    Terminated,
}

impl InstanceState {
    fn can_become(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (ColdStarting, Benchmarking)
                | (ColdStarting, Busy)
                | (Benchmarking, Busy)
                | (Benchmarking, Terminated)
                | (Busy, Warm)
                | (Busy, Terminated)
                | (Warm, Busy)
                | (Warm, Terminated)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judged {
    Unjudged,
    Passed,
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub node: NodeId,
    /// Equal to the hosting node's factor.
    pub perf_factor: f64,
    pub state: InstanceState,
    pub judged: Judged,
    pub created_at: Millis,
    pub last_used_at: Millis,
    pub current: Option<InvocationId>,
    pub served: u32,
    #[serde(skip)]
    pub idle_timer: Option<EventId>,
}

/// Executed phase durations of one attempt, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub prepare_ms: Millis,
    pub benchmark_ms: Millis,
    pub compute_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub id: InvocationId,
    pub vu_id: u32,
    /// Per-VU request number, used to key paired draws.
    pub ordinal: u64,
    pub submitted_at: Millis,
    pub retry_count: u32,
    pub phase_record: Vec<PhaseRecord>,
    pub completed_at: Option<Millis>,
}

impl Invocation {
    pub fn new(id: InvocationId, vu_id: u32, ordinal: u64, submitted_at: Millis) -> Self {
        Self {
            id,
            vu_id,
            ordinal,
            submitted_at,
            retry_count: 0,
            phase_record: Vec::new(),
            completed_at: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceAssignment {
    Warm(InstanceId),
    Cold { instance: InstanceId, delay_ms: Millis },
    NoCapacity,
}

/// Mutable platform state driven by the simulation loop.
pub struct Platform {
    config: PlatformConfig,
    nodes: Vec<WorkerNode>,
    instances: Vec<Instance>,
    /// Idle warm instances ordered by `(last_used_at, id)`.
    warm: BTreeSet<(Millis, InstanceId)>,
    queue: VecDeque<InvocationId>,
    placement_rng: ChaCha8Rng,
    cold_start_rng: ChaCha8Rng,
}

impl Platform {
    /// Node speed factors depend only on `seed`; `salt` separates the
    /// placement and cold-start streams of otherwise identical runs.
    pub fn new(config: PlatformConfig, seed: u64, salt: u64) -> Self {
        let mut perf_rng = rng_stream(seed, StreamId::NodePerf, 0);
        let nodes = (0..config.node_pool_size)
            .map(|i| WorkerNode {
                id: NodeId(i),
                perf_factor: sample_perf_factor(&config.perf_distribution, &mut perf_rng),
                capacity: config.node_capacity,
                live_instances: 0,
            })
            .collect();
        Self {
            nodes,
            instances: Vec::new(),
            warm: BTreeSet::new(),
            queue: VecDeque::new(),
            placement_rng: rng_stream(seed, StreamId::Placement, salt),
            cold_start_rng: rng_stream(seed, StreamId::ColdStart, salt),
            config,
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[WorkerNode] {
        &self.nodes
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, id: InstanceId) -> &Instance {
        &self.instances[id.0 as usize]
    }

    pub fn instance_mut(&mut self, id: InstanceId) -> &mut Instance {
        &mut self.instances[id.0 as usize]
    }

    pub fn queue(&self) -> &VecDeque<InvocationId> {
        &self.queue
    }

    pub fn warm_count(&self) -> usize {
        self.warm.len()
    }

    /// Append to the queue tail. Re-queued invocations go to the tail too.
    pub fn submit(&mut self, invocation: InvocationId) {
        debug_assert!(!self.queue.contains(&invocation), "{invocation} already queued");
        self.queue.push_back(invocation);
    }

    pub fn pop_queue(&mut self) -> Option<InvocationId> {
        self.queue.pop_front()
    }

    pub fn queue_head(&self) -> Option<InvocationId> {
        self.queue.front().copied()
    }

    /// Pick an instance for `invocation`: the least-recently-used idle warm
    /// instance if any, else a new instance on a uniformly random node with
    /// spare capacity, else `NoCapacity`.
    pub fn assign(&mut self, invocation: InvocationId, now: Millis) -> InstanceAssignment {
        if let Some(&(at, id)) = self.warm.iter().next() {
            self.warm.remove(&(at, id));
            let inst = &mut self.instances[id.0 as usize];
            debug_assert_eq!(inst.state, InstanceState::Warm);
            inst.state = InstanceState::Busy;
            inst.last_used_at = now;
            inst.current = Some(invocation);
            inst.served += 1;
            return InstanceAssignment::Warm(id);
        }
        let candidates: Vec<usize> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.has_spare_capacity())
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return InstanceAssignment::NoCapacity;
        }
        let node = &mut self.nodes[candidates[self.placement_rng.random_range(0..candidates.len())]];
        node.live_instances += 1;
        let id = InstanceId(self.instances.len() as u64);
        self.instances.push(Instance {
            id,
            node: node.id,
            perf_factor: node.perf_factor,
            state: InstanceState::ColdStarting,
            judged: Judged::Unjudged,
            created_at: now,
            last_used_at: now,
            current: Some(invocation),
            served: 1,
            idle_timer: None,
        });
        let delay_ms = self.config.cold_start_delay_ms.sample_ms(&mut self.cold_start_rng, 0);
        InstanceAssignment::Cold { instance: id, delay_ms }
    }

    pub fn transition(&mut self, id: InstanceId, next: InstanceState, now: Millis) -> Result<(), SimError> {
        let inst = &mut self.instances[id.0 as usize];
        if !inst.state.can_become(next) {
            return Err(SimError::Invariant {
                at: now,
                what: format!("instance {} cannot go {:?} -> {:?}", id.0, inst.state, next),
            });
        }
        inst.state = next;
        Ok(())
    }

    /// Busy -> Warm once an invocation finishes; joins the LRU pool.
    pub fn release(&mut self, id: InstanceId, now: Millis) -> Result<(), SimError> {
        self.transition(id, InstanceState::Warm, now)?;
        let inst = &mut self.instances[id.0 as usize];
        inst.last_used_at = now;
        inst.current = None;
        self.warm.insert((now, id));
        Ok(())
    }

    /// Time at which an idle instance becomes eligible for expiry.
    pub fn expiry_at(&self, id: InstanceId) -> Millis {
        self.instance(id).last_used_at + self.config.idle_timeout_ms
    }

    /// Terminate a warm instance that has been idle for `idle_timeout_ms`.
    pub fn expire_idle(&mut self, id: InstanceId, now: Millis) -> Result<(), SimError> {
        let inst = self.instance(id);
        if inst.state != InstanceState::Warm {
            return Err(SimError::Invariant {
                at: now,
                what: format!("expiry of non-warm instance {} ({:?})", id.0, inst.state),
            });
        }
        if now < inst.last_used_at + self.config.idle_timeout_ms {
            return Err(SimError::Invariant {
                at: now,
                what: format!("instance {} expired early", id.0),
            });
        }
        self.warm.remove(&(inst.last_used_at, id));
        self.terminate(id, now)
    }

    /// Immediately terminate a benchmarking or busy instance. The caller
    /// re-queues its invocation first. No-op on a terminated instance.
    pub fn crash_instance(&mut self, id: InstanceId, now: Millis) -> Result<(), SimError> {
        match self.instance(id).state {
            InstanceState::Terminated => Ok(()),
            InstanceState::Benchmarking | InstanceState::Busy => self.terminate(id, now),
            other => Err(SimError::Invariant {
                at: now,
                what: format!("crash of instance {} in state {other:?}", id.0),
            }),
        }
    }

    fn terminate(&mut self, id: InstanceId, now: Millis) -> Result<(), SimError> {
        self.transition(id, InstanceState::Terminated, now)?;
        let inst = &mut self.instances[id.0 as usize];
        inst.current = None;
        inst.idle_timer = None;
        let node = &mut self.nodes[inst.node.0 as usize];
        node.live_instances -= 1;
        Ok(())
    }

    /// Capacity accounting check used after every event.
    pub fn check_capacity(&self, now: Millis) -> Result<(), SimError> {
        let mut live = vec![0u32; self.nodes.len()];
        for inst in &self.instances {
            if inst.state != InstanceState::Terminated {
                live[inst.node.0 as usize] += 1;
            }
        }
        for (node, count) in self.nodes.iter().zip(live) {
            if count != node.live_instances || count > node.capacity {
                return Err(SimError::Invariant {
                    at: now,
                    what: format!(
                        "node {} holds {count} instances (tracked {}, capacity {})",
                        node.id.0, node.live_instances, node.capacity
                    ),
                });
            }
        }
        Ok(())
    }
}

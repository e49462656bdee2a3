//! One simulated run: virtual users, platform, and policy on a single event
//! loop.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{AttemptRecord, Classification, Outcome};
use crate::error::SimError;
use crate::platform::{
    InstanceAssignment, InstanceId, InstanceState, Invocation, InvocationId, Judged, NodeId, PhaseRecord, Platform,
    PlatformConfig,
};
use crate::policy::{
    self, on_cold_start, sample_benchmark_score, BenchmarkResult, Decision, ElysiumThreshold, OnlineEstimator,
    PolicyConfig, PolicyMode, ThresholdMode,
};
use crate::sim_core::{keyed_rng, rng_stream, Event, Millis, Scheduler, StreamId};
use crate::workload::{execute_attempt, next_submission, AttemptPlan, AttemptStart, FunctionProfile};

/// Everything needed for one run.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub platform: &'a PlatformConfig,
    pub policy: &'a PolicyConfig,
    pub function: &'a FunctionProfile,
    pub mode: PolicyMode,
    /// Threshold at t = 0. Online mode replaces it on every tick.
    pub threshold: ElysiumThreshold,
    pub vu_count: u32,
    pub think_time_ms: Millis,
    pub duration_ms: Millis,
    pub seed: u64,
    /// Separates placement/noise streams of runs sharing a seed.
    pub salt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    InvocationArrival { vu: u32 },
    /// Cold-start delay elapsed; the instance starts executing.
    ColdStartReady { instance: InstanceId },
    BenchmarkComplete { instance: InstanceId },
    PhaseComplete { instance: InstanceId },
    InstanceIdleTimeout { instance: InstanceId },
    VuThinkDone { vu: u32 },
    OnlineTick,
    ExperimentEnd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub submitted: u64,
    pub completed: u64,
    pub incomplete: u64,
    pub cold_starts: u64,
    pub benchmarks: u64,
    pub terminations: u64,
    pub exempt: u64,
    pub warm_reuses: u64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: InstanceId,
    pub node: NodeId,
    pub perf_factor: f64,
    pub judged: Judged,
    pub served: u32,
    pub created_at: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub seed: u64,
    pub mode: PolicyMode,
    pub duration_ms: Millis,
    /// Finished and cut-off attempts, in the order they ended.
    pub trace: Vec<AttemptRecord>,
    pub invocations: Vec<Invocation>,
    pub benchmarks: Vec<BenchmarkResult>,
    pub instances: Vec<InstanceSummary>,
    /// `(time, value)` every time the live threshold changed, starting at 0.
    pub threshold_history: Vec<(Millis, f64)>,
    pub counters: RunCounters,
}

struct Active {
    invocation: InvocationId,
    cold: bool,
    started_at: Option<Millis>,
    plan: Option<AttemptPlan>,
    decision: Option<Decision>,
}

#[derive(Default)]
struct Vu {
    next_ordinal: u64,
    in_flight: Option<InvocationId>,
}

struct World<'a> {
    spec: &'a RunSpec<'a>,
    platform: Platform,
    invocations: Vec<Invocation>,
    vus: Vec<Vu>,
    active: BTreeMap<InstanceId, Active>,
    trace: Vec<AttemptRecord>,
    benchmarks: Vec<BenchmarkResult>,
    threshold: ElysiumThreshold,
    threshold_history: Vec<(Millis, f64)>,
    estimator: Option<OnlineEstimator>,
    noise_rng: ChaCha8Rng,
    counters: RunCounters,
    stopped: bool,
}

/// Run the simulation described by `spec` to completion.
pub fn simulate(spec: &RunSpec<'_>) -> Result<RunOutput, SimError> {
    let online = spec.mode == PolicyMode::Enforce && spec.policy.threshold_mode == ThresholdMode::Online;
    let estimator = if online {
        Some(OnlineEstimator::new(spec.policy.pass_fraction).map_err(|e| SimError::Invariant {
            at: 0,
            what: e.to_string(),
        })?)
    } else {
        None
    };
    let mut world = World {
        spec,
        platform: Platform::new(spec.platform.clone(), spec.seed, spec.salt),
        invocations: Vec::new(),
        vus: (0..spec.vu_count).map(|_| Vu::default()).collect(),
        active: BTreeMap::new(),
        trace: Vec::new(),
        benchmarks: Vec::new(),
        threshold: spec.threshold,
        threshold_history: vec![(0, spec.threshold.value)],
        estimator,
        noise_rng: rng_stream(spec.seed, StreamId::BenchmarkNoise, spec.salt),
        counters: RunCounters::default(),
        stopped: false,
    };

    let mut sched = Scheduler::new();
    sched.schedule(spec.duration_ms, EventKind::ExperimentEnd)?;
    for vu in 0..spec.vu_count {
        sched.schedule(0, EventKind::InvocationArrival { vu })?;
    }
    if online {
        sched.schedule(spec.policy.online_tick_ms, EventKind::OnlineTick)?;
    }

    let events = sched.run_until(spec.duration_ms, |s, e| world.handle(s, e))?;
    world.counters.events = events;
    world.finish(spec.duration_ms)
}

impl World<'_> {
    fn handle(&mut self, s: &mut Scheduler<EventKind>, event: Event<EventKind>) -> Result<(), SimError> {
        let now = event.fire_at;
        match event.kind {
            EventKind::InvocationArrival { vu } | EventKind::VuThinkDone { vu } => self.arrive(s, vu, now)?,
            EventKind::ColdStartReady { instance } => self.cold_start_ready(s, instance, now)?,
            EventKind::BenchmarkComplete { instance } => self.benchmark_complete(s, instance, now)?,
            EventKind::PhaseComplete { instance } => self.phase_complete(s, instance, now)?,
            EventKind::InstanceIdleTimeout { instance } => {
                self.platform.instance_mut(instance).idle_timer = None;
                self.platform.expire_idle(instance, now)?;
                self.dispatch(s, now)?;
            }
            EventKind::OnlineTick => {
                let in_outage = self
                    .spec
                    .policy
                    .online_outage
                    .is_some_and(|w| now >= w.start_ms && now < w.end_ms);
                if let (false, Some(est)) = (in_outage, self.estimator.as_mut()) {
                    let next = est.online_threshold_tick(self.threshold);
                    if next != self.threshold {
                        self.threshold = next;
                        self.threshold_history.push((now, next.value));
                    }
                }
                s.schedule_in(self.spec.policy.online_tick_ms, EventKind::OnlineTick)?;
            }
            EventKind::ExperimentEnd => self.stopped = true,
        }
        self.check(now)
    }

    fn arrive(&mut self, s: &mut Scheduler<EventKind>, vu: u32, now: Millis) -> Result<(), SimError> {
        if self.stopped || now >= self.spec.duration_ms {
            return Ok(());
        }
        let state = &mut self.vus[vu as usize];
        if let Some(prev) = state.in_flight {
            return Err(SimError::Invariant {
                at: now,
                what: format!("VU {vu} submitted while invocation {prev} is in flight"),
            });
        }
        let id = InvocationId(self.invocations.len() as u64);
        self.invocations.push(Invocation::new(id, vu, state.next_ordinal, now));
        state.next_ordinal += 1;
        state.in_flight = Some(id);
        self.counters.submitted += 1;
        self.platform.submit(id);
        self.dispatch(s, now)
    }

    /// Drain the queue head-first until it is empty or the platform is full.
    fn dispatch(&mut self, s: &mut Scheduler<EventKind>, now: Millis) -> Result<(), SimError> {
        while let Some(head) = self.platform.queue_head() {
            match self.platform.assign(head, now) {
                InstanceAssignment::NoCapacity => break,
                InstanceAssignment::Warm(instance) => {
                    self.platform.pop_queue();
                    if let Some(timer) = self.platform.instance_mut(instance).idle_timer.take() {
                        s.cancel(timer);
                    }
                    let inst = self.platform.instance(instance);
                    if self.spec.mode == PolicyMode::Enforce && inst.judged == Judged::Unjudged {
                        return Err(SimError::Invariant {
                            at: now,
                            what: format!("unjudged instance {} reused", instance.0),
                        });
                    }
                    self.counters.warm_reuses += 1;
                    let prepare = self.draw_prepare(head);
                    let plan = execute_attempt(AttemptStart::Warm, inst.perf_factor, prepare, self.spec.function);
                    s.schedule(now + plan.end_at, EventKind::PhaseComplete { instance })?;
                    self.active.insert(
                        instance,
                        Active {
                            invocation: head,
                            cold: false,
                            started_at: Some(now),
                            plan: Some(plan),
                            decision: None,
                        },
                    );
                }
                InstanceAssignment::Cold { instance, delay_ms } => {
                    self.platform.pop_queue();
                    self.counters.cold_starts += 1;
                    s.schedule(now + delay_ms, EventKind::ColdStartReady { instance })?;
                    self.active.insert(
                        instance,
                        Active {
                            invocation: head,
                            cold: true,
                            started_at: None,
                            plan: None,
                            decision: None,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn draw_prepare(&self, id: InvocationId) -> Millis {
        let inv = &self.invocations[id.0 as usize];
        let mut rng = keyed_rng(
            self.spec.seed,
            StreamId::Prepare,
            &[self.spec.salt, inv.vu_id as u64, inv.ordinal, inv.retry_count as u64],
        );
        self.spec.function.prepare_ms.sample_ms(&mut rng, 1)
    }

    fn cold_start_ready(&mut self, s: &mut Scheduler<EventKind>, instance: InstanceId, now: Millis) -> Result<(), SimError> {
        let invocation = self.active[&instance].invocation;
        let prepare = self.draw_prepare(invocation);
        let perf = self.platform.instance(instance).perf_factor;
        let spec = self.spec;

        let start = if spec.mode == PolicyMode::Disabled {
            AttemptStart::ColdUnjudged
        } else {
            let noise_rng = &mut self.noise_rng;
            let decision = on_cold_start(
                &self.invocations[invocation.0 as usize],
                instance,
                now,
                spec.policy.retry_cap,
                &self.threshold,
                spec.mode,
                || sample_benchmark_score(spec.function.benchmark_base_ms, perf, spec.policy.benchmark_noise_sigma, noise_rng),
            );
            AttemptStart::Cold(decision)
        };
        let plan = execute_attempt(start, perf, prepare, spec.function);
        match plan.judge_at {
            Some(judge_at) => {
                self.platform.transition(instance, InstanceState::Benchmarking, now)?;
                s.schedule(now + judge_at, EventKind::BenchmarkComplete { instance })?;
            }
            None => {
                if start == AttemptStart::Cold(Decision::ExemptPass) {
                    self.platform.instance_mut(instance).judged = Judged::Exempt;
                    self.counters.exempt += 1;
                }
                self.platform.transition(instance, InstanceState::Busy, now)?;
                s.schedule(now + plan.end_at, EventKind::PhaseComplete { instance })?;
            }
        }
        let active = self.active.get_mut(&instance).expect("active cold start");
        active.started_at = Some(now);
        active.plan = Some(plan);
        active.decision = match start {
            AttemptStart::Cold(d) => Some(d),
            _ => None,
        };
        Ok(())
    }

    fn benchmark_complete(&mut self, s: &mut Scheduler<EventKind>, instance: InstanceId, now: Millis) -> Result<(), SimError> {
        let active = &self.active[&instance];
        let decision = active.decision.expect("benchmark implies a decision");
        let plan = active.plan.expect("benchmark implies a plan");
        let invocation = active.invocation;
        let score = decision.score().expect("benchmarked decision has a score");
        self.counters.benchmarks += 1;
        self.benchmarks.push(BenchmarkResult {
            instance_id: instance,
            score,
            measured_at: now,
        });
        let outage = self
            .spec
            .policy
            .online_outage
            .is_some_and(|w| now >= w.start_ms && now < w.end_ms);
        if let (false, Some(est)) = (outage, self.estimator.as_mut()) {
            est.observe(score);
        }

        match decision {
            Decision::Terminate { .. } => {
                let active = self.active.remove(&instance).expect("active");
                self.record(instance, &active, Outcome::Crashed, now);
                let inv = &mut self.invocations[invocation.0 as usize];
                policy::requeue(inv, self.spec.policy.retry_cap);
                self.platform.submit(invocation);
                self.platform.crash_instance(instance, now)?;
                self.counters.terminations += 1;
                self.dispatch(s, now)
            }
            _ => {
                self.platform.instance_mut(instance).judged = Judged::Passed;
                self.platform.transition(instance, InstanceState::Busy, now)?;
                s.schedule(now + plan.compute_ms, EventKind::PhaseComplete { instance })?;
                Ok(())
            }
        }
    }

    fn phase_complete(&mut self, s: &mut Scheduler<EventKind>, instance: InstanceId, now: Millis) -> Result<(), SimError> {
        let active = self.active.remove(&instance).expect("active attempt");
        let id = active.invocation;
        self.record(instance, &active, Outcome::Completed, now);
        self.invocations[id.0 as usize].completed_at = Some(now);
        self.counters.completed += 1;

        self.platform.release(instance, now)?;
        let timer = s.schedule(self.platform.expiry_at(instance), EventKind::InstanceIdleTimeout { instance })?;
        self.platform.instance_mut(instance).idle_timer = Some(timer);

        let vu = self.invocations[id.0 as usize].vu_id;
        self.vus[vu as usize].in_flight = None;
        if let Some(at) = next_submission(now, self.spec.think_time_ms, self.spec.duration_ms) {
            s.schedule(at, EventKind::VuThinkDone { vu })?;
        }
        self.dispatch(s, now)
    }

    /// Append the attempt to the trace. For cut-off attempts the phases are
    /// truncated to what ran before `now`.
    fn record(&mut self, instance: InstanceId, active: &Active, outcome: Outcome, now: Millis) {
        let (Some(started_at), Some(plan)) = (active.started_at, active.plan) else {
            return;
        };
        let inst = self.platform.instance(instance);
        let inv = &mut self.invocations[active.invocation.0 as usize];
        let elapsed = now - started_at;
        let (mut prepare, mut bench, mut compute) = (plan.prepare_ms, plan.benchmark_ms, plan.compute_ms);
        let mut classification = plan.classification;
        if outcome == Outcome::Cutoff {
            if let Some(parallel) = plan.judge_at {
                prepare = prepare.min(elapsed);
                bench = bench.min(elapsed);
                compute = elapsed.saturating_sub(parallel);
                // never judged before the cutoff: not a termination
                if classification == Classification::Terminated {
                    classification = Classification::PassedColdStart;
                }
            } else {
                prepare = prepare.min(elapsed);
                compute = elapsed - prepare;
            }
        }
        inv.phase_record.push(PhaseRecord {
            prepare_ms: prepare,
            benchmark_ms: bench,
            compute_ms: compute,
        });
        let mut record = AttemptRecord {
            invocation_id: inv.id,
            vu_id: inv.vu_id,
            attempt_index: inv.retry_count,
            classification,
            outcome,
            exempt: active.decision == Some(Decision::ExemptPass),
            node_id: inst.node,
            instance_id: instance.0,
            perf_factor: inst.perf_factor,
            prepare_ms: prepare,
            benchmark_ms: bench,
            benchmark_score: active.decision.and_then(|d| d.score()),
            compute_ms: compute,
            billed_ms: 0,
            submitted_at: inv.submitted_at,
            started_at,
            ended_at: now,
            completed_at: (outcome == Outcome::Completed).then_some(now),
        };
        record.billed_ms = crate::cost::billed_ms(&record).expect("finished attempt");
        debug_assert!(!active.cold || record.classification != Classification::WarmReuse);
        self.trace.push(record);
    }

    fn check(&self, now: Millis) -> Result<(), SimError> {
        let c = &self.counters;
        let queued = self.platform.queue().len() as u64;
        let in_flight = self.active.len() as u64;
        if c.submitted != c.completed + queued + in_flight {
            return Err(SimError::Invariant {
                at: now,
                what: format!(
                    "conservation: submitted {} != completed {} + queued {queued} + in-flight {in_flight}",
                    c.submitted, c.completed
                ),
            });
        }
        Ok(())
    }

    fn finish(mut self, t_end: Millis) -> Result<RunOutput, SimError> {
        let active = std::mem::take(&mut self.active);
        for (instance, a) in &active {
            self.record(*instance, a, Outcome::Cutoff, t_end);
        }
        self.counters.incomplete = self.counters.submitted - self.counters.completed;
        self.platform.check_capacity(t_end)?;
        let cap = self.spec.policy.retry_cap;
        if let Some(inv) = self.invocations.iter().find(|i| i.retry_count > cap) {
            return Err(SimError::Invariant {
                at: t_end,
                what: format!("invocation {} retried {} times (cap {cap})", inv.id, inv.retry_count),
            });
        }
        let instances = self
            .platform
            .instances()
            .iter()
            .map(|i| InstanceSummary {
                id: i.id,
                node: i.node,
                perf_factor: i.perf_factor,
                judged: i.judged,
                served: i.served,
                created_at: i.created_at,
            })
            .collect();
        Ok(RunOutput {
            seed: self.spec.seed,
            mode: self.spec.mode,
            duration_ms: t_end,
            trace: self.trace,
            invocations: self.invocations,
            benchmarks: self.benchmarks,
            instances,
            threshold_history: self.threshold_history,
            counters: self.counters,
        })
    }
}

//! Deterministic discrete-event engine.
//!
//! Virtual time is an integer count of milliseconds. Events are ordered by
//! `(fire_at, seq)` where `seq` is a monotonically increasing insertion
//! counter, so events that share a timestamp fire in FIFO order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;

/// Virtual milliseconds.
pub type Millis = u64;

/// Handle returned by [`Scheduler::schedule`]; equal to the event's `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Event<K> {
    pub fire_at: Millis,
    pub seq: u64,
    pub kind: K,
}

struct Entry<K> {
    fire_at: Millis,
    seq: u64,
    kind: K,
}

impl<K> PartialEq for Entry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<K> Eq for Entry<K> {}

impl<K> PartialOrd for Entry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Entry<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Virtual clock plus pending-event queue.
pub struct Scheduler<K> {
    now: Millis,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<K>>>,
    live: HashSet<u64>,
    cancelled: HashSet<u64>,
    last_popped: Option<(Millis, u64)>,
}

impl<K> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Scheduler<K> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            cancelled: HashSet::new(),
            last_popped: None,
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Number of events still pending, excluding cancelled ones.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    /// Enqueue `kind` to fire at the absolute time `fire_at`.
    pub fn schedule(&mut self, fire_at: Millis, kind: K) -> Result<EventId, SimError> {
        if fire_at < self.now {
            return Err(SimError::ScheduleInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { fire_at, seq, kind }));
        self.live.insert(seq);
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: Millis, kind: K) -> Result<EventId, SimError> {
        self.schedule(self.now + delay, kind)
    }

    /// Cancel a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if self.live.remove(&id.0) {
            self.cancelled.insert(id.0);
            true
        } else {
            false
        }
    }

    fn pop_due(&mut self, t_end: Millis) -> Result<Option<Event<K>>, SimError> {
        loop {
            let due = matches!(self.heap.peek(), Some(Reverse(e)) if e.fire_at <= t_end);
            if !due {
                return Ok(None);
            }
            let Reverse(entry) = self.heap.pop().expect("peeked");
            if self.cancelled.remove(&entry.seq) {
                continue;
            }
            self.live.remove(&entry.seq);
            let key = (entry.fire_at, entry.seq);
            if let Some(last) = self.last_popped {
                if key < last {
                    return Err(SimError::OutOfOrder {
                        fire_at: entry.fire_at,
                        seq: entry.seq,
                    });
                }
            }
            self.last_popped = Some(key);
            self.now = entry.fire_at;
            return Ok(Some(Event {
                fire_at: entry.fire_at,
                seq: entry.seq,
                kind: entry.kind,
            }));
        }
    }

    /// Process every event with `fire_at <= t_end` in `(fire_at, seq)` order,
    /// then advance the clock to `t_end`. Returns the number of events handled.
    pub fn run_until<E, F>(&mut self, t_end: Millis, mut handler: F) -> Result<u64, E>
    where
        E: From<SimError>,
        F: FnMut(&mut Scheduler<K>, Event<K>) -> Result<(), E>,
    {
        let mut processed = 0;
        while let Some(event) = self.pop_due(t_end)? {
            handler(self, event)?;
            processed += 1;
        }
        if t_end > self.now {
            self.now = t_end;
        }
        Ok(processed)
    }
}

/// Independent random streams, one per stochastic concern.
///
/// Keeping the concerns on separate streams means that turning the policy on
/// or off changes only the draws of the streams it actually consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamId {
    NodePerf,
    Placement,
    Prepare,
    BenchmarkNoise,
    ColdStart,
    /// Auxiliary stream for random config generation and tests.
    Aux,
}

impl StreamId {
    fn index(self) -> u64 {
        match self {
            StreamId::NodePerf => 1,
            StreamId::Placement => 2,
            StreamId::Prepare => 3,
            StreamId::BenchmarkNoise => 4,
            StreamId::ColdStart => 5,
            StreamId::Aux => 6,
        }
    }
}

/// A ChaCha8 generator keyed on `(seed, stream, salt)`.
///
/// `salt` separates otherwise identical streams, e.g. the pre-test run from
/// the main run.
pub fn rng_stream(seed: u64, stream: StreamId, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.index() | (salt << 8));
    rng
}

/// Keyed one-shot generator for draws that must line up across runs
/// regardless of how many other draws happened before them.
pub fn keyed_rng(seed: u64, stream: StreamId, key: &[u64]) -> ChaCha8Rng {
    // splitmix64 fold of the key into the seed
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &k in key {
        h = h.wrapping_add(k).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(stream.index());
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn drain(s: &mut Scheduler<&'static str>, t: Millis) -> Vec<&'static str> {
        let mut seen = Vec::new();
        s.run_until::<SimError, _>(t, |_, e| {
            seen.push(e.kind);
            Ok(())
        })
        .unwrap();
        seen
    }

    #[test]
    fn first_event_at_zero_fires() {
        let mut s = Scheduler::new();
        s.schedule(0, "first").unwrap();
        assert_eq!(drain(&mut s, 0), vec!["first"]);
    }

    #[test]
    fn ties_are_fifo() {
        let mut s = Scheduler::new();
        s.schedule(500, "A").unwrap();
        s.schedule(500, "B").unwrap();
        s.schedule(400, "C").unwrap();
        assert_eq!(drain(&mut s, 1000), vec!["C", "A", "B"]);
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.run_until::<SimError, _>(20, |_, _| Ok(())).unwrap();
        assert_eq!(s.now(), 20);
        let err = s.schedule(10, ()).unwrap_err();
        assert!(matches!(err, SimError::ScheduleInPast { fire_at: 10, now: 20 }));
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        let n = s.run_until::<SimError, _>(1000, |_, _| Ok(())).unwrap();
        assert_eq!(n, 0);
        assert_eq!(s.now(), 1000);
    }

    #[test]
    fn boundary_is_inclusive() {
        let mut s = Scheduler::new();
        for t in 1..=3 {
            s.schedule(t, t).unwrap();
        }
        let n = s.run_until::<SimError, _>(2, |_, _| Ok(())).unwrap();
        assert_eq!(n, 2);
        assert_eq!(s.now(), 2);
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn cancelled_events_never_fire() {
        let mut s = Scheduler::new();
        let a = s.schedule(5, "A").unwrap();
        s.schedule(6, "B").unwrap();
        assert!(s.cancel(a));
        assert!(!s.cancel(a));
        assert_eq!(drain(&mut s, 10), vec!["B"]);
        assert!(!s.cancel(a));
    }

    #[test]
    fn handler_can_schedule_follow_ups() {
        let mut s = Scheduler::new();
        s.schedule(0, 0u32).unwrap();
        let mut times = Vec::new();
        s.run_until::<SimError, _>(100, |sched, e| {
            times.push(e.fire_at);
            if e.kind < 4 {
                sched.schedule_in(10, e.kind + 1)?;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(times, vec![0, 10, 20, 30, 40]);
    }

    #[test]
    fn streams_are_reproducible_and_independent() {
        let a: Vec<u64> = (0..8).map(|_| 0).scan(rng_stream(7, StreamId::NodePerf, 0), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..8).map(|_| 0).scan(rng_stream(7, StreamId::NodePerf, 0), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..8).map(|_| 0).scan(rng_stream(7, StreamId::Placement, 0), |r, _| Some(r.random())).collect();
        let d: Vec<u64> = (0..8).map(|_| 0).scan(rng_stream(7, StreamId::NodePerf, 1), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        let k1: u64 = keyed_rng(3, StreamId::Prepare, &[1, 2]).random();
        let k2: u64 = keyed_rng(3, StreamId::Prepare, &[1, 2]).random();
        let k3: u64 = keyed_rng(3, StreamId::Prepare, &[2, 1]).random();
        assert_eq!(k1, k2);
        assert_ne!(k1, k3);
    }
}

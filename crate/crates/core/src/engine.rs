//! Deterministic discrete-event scheduler.
//!
//! Time is an integer count of picoseconds. Events firing at the same instant
//! are dispatched in insertion order, so a run is a pure function of its
//! inputs.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use crate::error::SimError;

/// Simulated time in picoseconds since the start of the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns * 1_000)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000_000)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

/// Time to move `bytes` through a pipe of `bytes_per_sec`, rounded up to
/// the next whole picosecond.
pub fn serialization_time(bytes: u64, bytes_per_sec: u64) -> SimTime {
    let num = bytes as u128 * 1_000_000_000_000u128;
    let bw = bytes_per_sec as u128;
    SimTime(num.div_ceil(bw) as u64)
}

/// Identifies the component an event is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentId {
    Node(u16),
    Fam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u64);

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub target: ComponentId,
    pub payload: P,
}

impl<P> Event<P> {
    pub fn id(&self) -> EventId {
        EventId(self.sequence)
    }
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<P> Eq for Queued<P> {}
impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl<P> Queued<P> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.fire_time, self.0.sequence)
    }
}

/// A single global event queue.
pub struct Scheduler<P> {
    now: SimTime,
    next_sequence: u64,
    heap: BinaryHeap<Reverse<Queued<P>>>,
    cancelled: HashSet<u64>,
    dispatched: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_sequence: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            dispatched: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events dispatched over the scheduler's lifetime.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn schedule(
        &mut self,
        fire_time: SimTime,
        target: ComponentId,
        payload: P,
    ) -> Result<EventId, SimError> {
        if fire_time < self.now {
            return Err(SimError::PastEvent {
                at: fire_time,
                now: self.now,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(Reverse(Queued(Event {
            fire_time,
            sequence,
            target,
            payload,
        })));
        Ok(EventId(sequence))
    }

    /// Schedules `delay` after the current time. Cannot fail.
    pub fn schedule_in(&mut self, delay: SimTime, target: ComponentId, payload: P) -> EventId {
        let at = self.now + delay;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Returns false if the event already fired or was already cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if id.0 >= self.next_sequence {
            return false;
        }
        let live = self.heap.iter().any(|Reverse(q)| q.0.sequence == id.0);
        live && self.cancelled.insert(id.0)
    }

    fn peek_live_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse(top)) = self.heap.peek() {
            if self.cancelled.remove(&top.0.sequence) {
                self.heap.pop();
                continue;
            }
            return Some(top.0.fire_time);
        }
        None
    }

    /// Removes and returns the next event, advancing the clock to its time.
    pub fn pop(&mut self) -> Option<Event<P>> {
        self.peek_live_time()?;
        let Reverse(Queued(ev)) = self.heap.pop()?;
        debug_assert!(ev.fire_time >= self.now);
        self.now = ev.fire_time;
        self.dispatched += 1;
        Some(ev)
    }

    /// Pops the next event only if it fires at or before `limit`.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<P>> {
        match self.peek_live_time() {
            Some(t) if t <= limit => self.pop(),
            _ => None,
        }
    }

    /// Dispatches every event with `fire_time <= limit` through `handler`,
    /// then leaves the clock at `limit`. Handlers may schedule further
    /// events; those are dispatched too if they fall within the limit.
    pub fn run_until<F>(&mut self, limit: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Scheduler<P>, Event<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(limit) {
            handler(self, ev);
            count += 1;
        }
        if limit > self.now {
            self.now = limit;
        }
        count
    }

    /// Drains the queue completely. The clock stays at the last fire time.
    pub fn run<F>(&mut self, mut handler: F) -> u64
    where
        F: FnMut(&mut Scheduler<P>, Event<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop() {
            handler(self, ev);
            count += 1;
        }
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: ComponentId = ComponentId::Fam;

    #[test]
    fn zero_delay_fires_next() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(0), T, "a").unwrap();
        let ev = s.pop().unwrap();
        assert_eq!(ev.payload, "a");
        assert_eq!(s.now(), SimTime(0));
    }

    #[test]
    fn ties_break_by_insertion() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(100), T, "A").unwrap();
        s.schedule(SimTime(100), T, "B").unwrap();
        let mut order = vec![];
        s.run(|_, ev| order.push(ev.payload));
        assert_eq!(order, ["A", "B"]);
    }

    #[test]
    fn rejects_past() {
        let mut s: Scheduler<()> = Scheduler::new();
        s.run_until(SimTime(60), |_, _| {});
        assert!(matches!(
            s.schedule(SimTime(50), T, ()),
            Err(SimError::PastEvent { .. })
        ));
    }

    #[test]
    fn empty_run_until_advances_clock() {
        let mut s: Scheduler<()> = Scheduler::new();
        let n = s.run_until(SimTime(1_000_000_000), |_, _| {});
        assert_eq!(n, 0);
        assert_eq!(s.now(), SimTime(1_000_000_000));
    }

    #[test]
    fn run_until_stops_at_limit() {
        let mut s = Scheduler::new();
        for t in 1..=3 {
            s.schedule(SimTime(t), T, t).unwrap();
        }
        let n = s.run_until(SimTime(2), |_, _| {});
        assert_eq!(n, 2);
        assert_eq!(s.now(), SimTime(2));
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn cancel_before_fire() {
        let mut s = Scheduler::new();
        let a = s.schedule(SimTime(5), T, 1).unwrap();
        s.schedule(SimTime(6), T, 2).unwrap();
        assert!(s.cancel(a));
        assert!(!s.cancel(a));
        let mut seen = vec![];
        s.run(|_, ev| seen.push(ev.payload));
        assert_eq!(seen, [2]);
        assert!(!s.cancel(a));
    }

    #[test]
    fn handler_can_chain_events() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(0), T, 0u32).unwrap();
        let mut log = vec![];
        s.run_until(SimTime(50), |sch, ev| {
            log.push((sch.now().0, ev.payload));
            if ev.payload < 10 {
                sch.schedule_in(SimTime(10), T, ev.payload + 1);
            }
        });
        assert_eq!(log.len(), 6);
        assert_eq!(log.last(), Some(&(50, 5)));
    }

    #[test]
    fn serialization_rounds_up() {
        // 28 B at 128 GB/s = 218.75 ps
        assert_eq!(serialization_time(28, 128_000_000_000), SimTime(219));
        assert_eq!(serialization_time(512, 128_000_000_000), SimTime(4000));
        assert_eq!(serialization_time(64, 19_200_000_000), SimTime(3334));
    }
}

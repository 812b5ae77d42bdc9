//! Shared FAM endpoint.
//!
//! Requests from every node land in the input queues and are handed to the
//! memory backend once per issue cycle. One issue cycle is the time the
//! backend needs, at aggregate bandwidth, to move one 64 B unit, so both
//! schedulers meter issue in 64 B units: a request of `n` units uses `n`
//! cycles' worth of credit.
//!
//! In `Fifo` mode there is a single arrival-ordered queue. In `Wfq` mode
//! demand-class traffic (demands and writebacks) and prefetch-class traffic
//! (core and DRAM-cache prefetches) wait in separate queues, arbitrated by a
//! work-conserving deficit weighted round robin:
//!
//! * the round counter cycles through `0..=W`; rounds `1..=W` prefer
//!   demand, round `0` prefers prefetch;
//! * the preferred class's deficit grows by `quantum` (up to its cap);
//! * the preferred class issues if its head fits in its deficit, otherwise
//!   the other class gets the slot under the same rule;
//! * when the preferred queue is empty the round's quantum goes to the
//!   other class instead of being lost.
//!
//! With both queues backlogged, demand gets `W` units per window and
//! prefetch one unit, so served bytes approach `W : 1`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{serialization_time, SimTime};
use crate::request::{Request, RequestClass, LINE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Fifo,
    Wfq,
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Fifo => "fifo",
            SchedulerKind::Wfq => "wfq",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fifo" => Ok(SchedulerKind::Fifo),
            "wfq" => Ok(SchedulerKind::Wfq),
            other => Err(format!(
                "unknown scheduler {other:?} (expected fifo or wfq)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DwrrConfig {
    pub weight: u32,
    pub quantum: u64,
    /// Demand deficit cap; never below the largest demand-queue request.
    pub max_demand_deficit: u64,
    pub max_prefetch_deficit: u64,
    /// DRAM-cache block size over demand block size.
    pub ratio: u64,
}

impl DwrrConfig {
    pub fn new(weight: u32, ratio: u64) -> Self {
        DwrrConfig {
            weight,
            quantum: 1,
            max_demand_deficit: 8u64.max(ratio),
            max_prefetch_deficit: 2 * ratio,
            ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pick {
    Demand,
    Prefetch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DwrrState {
    pub cfg: DwrrConfig,
    pub current_round: u32,
    pub demand_deficit: u64,
    pub prefetch_deficit: u64,
}

impl DwrrState {
    pub fn new(cfg: DwrrConfig) -> Self {
        DwrrState {
            cfg,
            current_round: 0,
            demand_deficit: 0,
            prefetch_deficit: 0,
        }
    }

    fn credit_demand(&mut self) {
        self.demand_deficit =
            (self.demand_deficit + self.cfg.quantum).min(self.cfg.max_demand_deficit);
    }

    fn credit_prefetch(&mut self) {
        self.prefetch_deficit =
            (self.prefetch_deficit + self.cfg.quantum).min(self.cfg.max_prefetch_deficit);
    }

    /// One issue cycle. Arguments are the unit sizes of the queue heads.
    pub fn step(&mut self, demand_head: Option<u64>, prefetch_head: Option<u64>) -> Option<Pick> {
        self.current_round = (self.current_round + 1) % (self.cfg.weight + 1);
        if self.current_round != 0 {
            self.credit_demand();
            if demand_head.is_none() {
                self.credit_prefetch();
            }
            self.try_demand(demand_head)
                .or_else(|| self.try_prefetch(prefetch_head))
        } else {
            self.credit_prefetch();
            if prefetch_head.is_none() {
                self.credit_demand();
            }
            self.try_prefetch(prefetch_head)
                .or_else(|| self.try_demand(demand_head))
        }
    }

    fn try_demand(&mut self, head: Option<u64>) -> Option<Pick> {
        let units = head?;
        if self.demand_deficit >= units {
            self.demand_deficit -= units;
            Some(Pick::Demand)
        } else {
            None
        }
    }

    fn try_prefetch(&mut self, head: Option<u64>) -> Option<Pick> {
        let units = head?;
        if self.prefetch_deficit >= units {
            self.prefetch_deficit -= units;
            Some(Pick::Prefetch)
        } else {
            None
        }
    }
}

/// Input queues plus the arbitration state for either scheduler.
#[derive(Clone, Debug)]
pub struct FamQueues {
    kind: SchedulerKind,
    fifo: VecDeque<Request>,
    fifo_credit: u64,
    fifo_cap: u64,
    demand: VecDeque<Request>,
    prefetch: VecDeque<Request>,
    dwrr: DwrrState,
}

impl FamQueues {
    pub fn new(kind: SchedulerKind, dwrr: DwrrConfig) -> Self {
        FamQueues {
            kind,
            fifo: VecDeque::new(),
            fifo_credit: 0,
            fifo_cap: dwrr.max_demand_deficit.max(dwrr.max_prefetch_deficit),
            demand: VecDeque::new(),
            prefetch: VecDeque::new(),
            dwrr: DwrrState::new(dwrr),
        }
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn dwrr(&self) -> &DwrrState {
        &self.dwrr
    }

    pub fn len(&self) -> usize {
        self.fifo.len() + self.demand.len() + self.prefetch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn demand_len(&self) -> usize {
        self.demand.len()
    }

    pub fn prefetch_len(&self) -> usize {
        self.prefetch.len()
    }

    pub fn enqueue(&mut self, req: Request) {
        match self.kind {
            SchedulerKind::Fifo => self.fifo.push_back(req),
            SchedulerKind::Wfq if req.class.is_prefetch() => self.prefetch.push_back(req),
            SchedulerKind::Wfq => self.demand.push_back(req),
        }
    }

    pub fn issue_cycle(&mut self) -> Option<Request> {
        match self.kind {
            SchedulerKind::Fifo => {
                self.fifo_credit = (self.fifo_credit + 1).min(self.fifo_cap);
                let units = self.fifo.front()?.units();
                if self.fifo_credit >= units {
                    self.fifo_credit -= units;
                    self.fifo.pop_front()
                } else {
                    None
                }
            }
            SchedulerKind::Wfq => {
                let d = self.demand.front().map(Request::units);
                let p = self.prefetch.front().map(Request::units);
                match self.dwrr.step(d, p)? {
                    Pick::Demand => self.demand.pop_front(),
                    Pick::Prefetch => self.prefetch.pop_front(),
                }
            }
        }
    }

    /// Runs `n` cycles with every queue empty.
    pub fn idle_cycles(&mut self, n: u64) {
        debug_assert!(self.is_empty());
        // deficits saturate long before this many idle cycles
        let exact = n.min(1024);
        for _ in 0..exact {
            self.issue_cycle();
        }
        let rest = n - exact;
        let w = self.dwrr.cfg.weight as u64 + 1;
        self.dwrr.current_round = ((self.dwrr.current_round as u64 + rest) % w) as u32;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackendConfig {
    pub channels: usize,
    pub access_latency: SimTime,
    /// Bytes per second, per channel.
    pub channel_bandwidth: u64,
}

impl BackendConfig {
    pub fn fam_default() -> Self {
        BackendConfig {
            channels: 2,
            access_latency: SimTime::from_ns(45),
            channel_bandwidth: 19_200_000_000,
        }
    }

    pub fn local_default() -> Self {
        BackendConfig {
            channels: 2,
            access_latency: SimTime::from_ns(45),
            channel_bandwidth: 25_600_000_000,
        }
    }

    pub fn aggregate_bandwidth(&self) -> u64 {
        self.channel_bandwidth * self.channels as u64
    }

    /// Time to hand one 64 B unit to the backend at aggregate bandwidth.
    pub fn issue_period(&self) -> SimTime {
        let ps = (LINE_BYTES as u128 * 1_000_000_000_000u128)
            .div_ceil(self.aggregate_bandwidth() as u128);
        SimTime(ps as u64)
    }
}

/// First-order DDR model: per-channel FIFO serialization plus a fixed
/// access latency that overlaps with later transfers.
#[derive(Clone, Debug)]
pub struct MemBackend {
    cfg: BackendConfig,
    free_at: Vec<SimTime>,
    bytes: u64,
}

impl MemBackend {
    pub fn new(cfg: BackendConfig) -> Self {
        MemBackend {
            cfg,
            free_at: vec![SimTime::ZERO; cfg.channels.max(1)],
            bytes: 0,
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn bytes_served(&self) -> u64 {
        self.bytes
    }

    /// Earliest-free channel, lowest index on ties.
    pub fn pick_channel(&self) -> usize {
        let mut best = 0;
        for (i, t) in self.free_at.iter().enumerate() {
            if *t < self.free_at[best] {
                best = i;
            }
        }
        best
    }

    /// Services `size` bytes starting no earlier than `at`; returns
    /// `(channel, completion)`.
    pub fn service(&mut self, size: u64, at: SimTime) -> (usize, SimTime) {
        let ch = self.pick_channel();
        let start = at.max(self.free_at[ch]);
        self.free_at[ch] = start + serialization_time(size, self.cfg.channel_bandwidth);
        self.bytes += size;
        (ch, self.free_at[ch] + self.cfg.access_latency)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FamStats {
    pub issued: [u64; 5],
    pub served_bytes: [u64; 5],
    pub arrivals: u64,
    pub max_queue: usize,
    depth_area: u128,
    last_change: SimTime,
}

impl FamStats {
    fn account(&mut self, now: SimTime, depth: usize) {
        let dt = now.saturating_sub(self.last_change).as_ps() as u128;
        self.depth_area += dt * depth as u128;
        self.last_change = now;
    }

    /// Time-averaged input-queue depth over `[0, end]`.
    pub fn mean_queue_depth(&self, end: SimTime) -> f64 {
        if end == SimTime::ZERO {
            return 0.0;
        }
        self.depth_area as f64 / end.as_ps() as f64
    }
}

/// Input queues, backend and issue-cycle bookkeeping.
#[derive(Clone, Debug)]
pub struct FamNode {
    queues: FamQueues,
    backend: MemBackend,
    period: SimTime,
    ticking: bool,
    last_tick: Option<SimTime>,
    stats: FamStats,
}

impl FamNode {
    pub fn new(kind: SchedulerKind, dwrr: DwrrConfig, backend: BackendConfig) -> Self {
        let mut queues = FamQueues::new(kind, dwrr);
        // the endpoint has been idle since forever: start with full credit
        queues.idle_cycles(1024);
        FamNode {
            queues,
            period: backend.issue_period(),
            backend: MemBackend::new(backend),
            ticking: false,
            last_tick: None,
            stats: FamStats::default(),
        }
    }

    pub fn queues(&self) -> &FamQueues {
        &self.queues
    }

    pub fn stats(&self) -> &FamStats {
        &self.stats
    }

    pub fn period(&self) -> SimTime {
        self.period
    }

    pub fn finish(&mut self, end: SimTime) {
        let depth = self.queues.len();
        self.stats.account(end, depth);
    }

    /// Queues an arriving request. Returns the time of the next issue cycle
    /// if the caller must schedule one.
    pub fn arrive(&mut self, req: Request, now: SimTime) -> Option<SimTime> {
        self.stats.account(now, self.queues.len());
        self.stats.arrivals += 1;
        let wake = if self.ticking {
            None
        } else {
            self.ticking = true;
            let at = match self.last_tick {
                None => now,
                Some(last) => {
                    let at = now.max(last + self.period);
                    let skipped = (at - last).as_ps() / self.period.as_ps();
                    // the cycle at `at` itself is not idle
                    self.queues.idle_cycles(skipped.saturating_sub(1));
                    at
                }
            };
            Some(at)
        };
        self.queues.enqueue(req);
        self.stats.max_queue = self.stats.max_queue.max(self.queues.len());
        wake
    }

    /// Runs one issue cycle. Returns the request handed to the backend with
    /// its completion time, and the time of the following cycle if any.
    pub fn tick(&mut self, now: SimTime) -> (Option<(Request, SimTime)>, Option<SimTime>) {
        self.stats.account(now, self.queues.len());
        self.last_tick = Some(now);
        let issued = self.queues.issue_cycle().map(|mut req| {
            req.t_issued = now;
            let (_, done) = self.backend.service(req.size, now);
            self.stats.issued[req.class.index()] += 1;
            self.stats.served_bytes[req.class.index()] += req.size;
            (req, done)
        });
        let next = if self.queues.is_empty() {
            self.ticking = false;
            None
        } else {
            Some(now + self.period)
        };
        (issued, next)
    }
}

/// Which FAM queue a class lands in under WFQ.
pub fn wfq_queue(class: RequestClass) -> Pick {
    if class.is_prefetch() {
        Pick::Prefetch
    } else {
        Pick::Demand
    }
}

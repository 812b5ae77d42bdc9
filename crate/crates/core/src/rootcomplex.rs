//! Per-node root complex: routes LLC misses through the DRAM cache, drives
//! the block prefetcher and its queue, and throttles prefetch issue when
//! demand latency climbs.

use std::collections::{HashMap, VecDeque};

use crate::dcache::{DcacheGeometry, DcacheMeta, Lookup, WriteOutcome};
use crate::engine::SimTime;
use crate::error::SimError;
use crate::famnode::{BackendConfig, MemBackend};
use crate::metrics::StatSet;
use crate::request::{Request, RequestClass, LINE_BYTES, PAGE_BYTES};
use crate::spp::{PrefetchCandidate, SppConfig, SppState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub enabled: bool,
    pub sampling_period: SimTime,
    pub ema_alpha: f64,
    pub min_window: usize,
    pub k: f64,
    /// Latency above `noise_threshold * L_min` counts as congestion.
    pub noise_threshold: f64,
    pub increase_factor: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    pub initial_rate: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            enabled: false,
            sampling_period: SimTime::from_us(10),
            ema_alpha: 0.25,
            min_window: 64,
            k: 0.5,
            noise_threshold: 1.25,
            increase_factor: 1.125,
            rate_min: 1.0,
            rate_max: 1024.0,
            initial_rate: 64.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcConfig {
    pub prefetch: bool,
    pub degree: usize,
    pub confidence_floor: f64,
    pub queue_capacity: usize,
    pub drop_threshold: f64,
    pub geometry: DcacheGeometry,
    pub spp: SppConfig,
    pub local: BackendConfig,
    pub adapt: AdaptConfig,
}

impl Default for RcConfig {
    fn default() -> Self {
        RcConfig {
            prefetch: true,
            degree: 4,
            confidence_floor: 0.25,
            queue_capacity: 256,
            drop_threshold: 0.95,
            geometry: DcacheGeometry::default(),
            spp: SppConfig::default(),
            local: BackendConfig::local_default(),
            adapt: AdaptConfig::default(),
        }
    }
}

/// Multiplicative decrease applied when latency exceeds the noise band.
///
/// `excess` is the latency overshoot past `threshold * l_min`, relative to
/// that same level and capped at 1.
pub fn decrease_factor(l: f64, l_min: f64, accuracy: f64, k: f64, threshold: f64) -> f64 {
    let level = threshold * l_min;
    let excess = if level > 0.0 {
        ((l - level) / level).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (1.0 - k * excess * (1.0 - accuracy.clamp(0.0, 1.0))).clamp(0.5, 1.0)
}

/// Instantaneous count plus its moving average.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EventCounter {
    pub instant: u64,
    pub average: f64,
}

impl EventCounter {
    pub fn bump(&mut self) {
        self.instant += 1;
    }

    fn fold(&mut self, alpha: f64) {
        self.average = alpha * self.instant as f64 + (1.0 - alpha) * self.average;
        self.instant = 0;
    }
}

#[derive(Clone, Debug)]
pub struct AdaptState {
    pub cfg: AdaptConfig,
    pub demand_issued: EventCounter,
    pub demand_returned: EventCounter,
    pub demand_total: EventCounter,
    pub prefetch_issued: EventCounter,
    latency_sum_ps: u128,
    pub latency_ema: Option<f64>,
    history: VecDeque<f64>,
    pub issue_rate: f64,
    pub tokens: u64,
    pub decreases: u64,
    pub samples: u64,
}

impl AdaptState {
    pub fn new(cfg: AdaptConfig) -> Self {
        let rate = cfg.initial_rate.clamp(cfg.rate_min, cfg.rate_max);
        AdaptState {
            cfg,
            demand_issued: EventCounter::default(),
            demand_returned: EventCounter::default(),
            demand_total: EventCounter::default(),
            prefetch_issued: EventCounter::default(),
            latency_sum_ps: 0,
            latency_ema: None,
            history: VecDeque::new(),
            issue_rate: rate,
            tokens: rate.round() as u64,
            decreases: 0,
            samples: 0,
        }
    }

    pub fn record_return(&mut self, latency: SimTime) {
        self.demand_returned.bump();
        self.latency_sum_ps += latency.as_ps() as u128;
    }

    /// Windowed minimum of recent latency averages.
    pub fn min_latency(&self) -> Option<f64> {
        self.history.iter().copied().reduce(f64::min)
    }

    /// Folds one sampling cycle and returns the new issue rate.
    pub fn sampling_tick(&mut self, accuracy: f64) -> f64 {
        let alpha = self.cfg.ema_alpha;
        self.samples += 1;
        let returned = self.demand_returned.instant;
        let sample = (returned > 0).then(|| self.latency_sum_ps as f64 / returned as f64);
        self.latency_sum_ps = 0;
        for c in [
            &mut self.demand_issued,
            &mut self.demand_returned,
            &mut self.demand_total,
            &mut self.prefetch_issued,
        ] {
            c.fold(alpha);
        }
        // no returns this cycle: nothing to judge, hold the rate
        if let Some(sample) = sample {
            let l = match self.latency_ema {
                Some(prev) => alpha * sample + (1.0 - alpha) * prev,
                None => sample,
            };
            self.latency_ema = Some(l);
            self.history.push_back(l);
            while self.history.len() > self.cfg.min_window {
                self.history.pop_front();
            }
            let l_min = self
                .min_latency()
                .expect("history holds the current sample");
            if l > self.cfg.noise_threshold * l_min {
                self.issue_rate *=
                    decrease_factor(l, l_min, accuracy, self.cfg.k, self.cfg.noise_threshold);
                self.decreases += 1;
            } else {
                self.issue_rate *= self.cfg.increase_factor;
            }
            self.issue_rate = self.issue_rate.clamp(self.cfg.rate_min, self.cfg.rate_max);
        }
        self.tokens = self.issue_rate.round() as u64;
        self.issue_rate
    }
}

#[derive(Clone, Debug)]
pub struct QueueEntry {
    pub request: Request,
    /// Demand and core-prefetch misses merged into this fetch.
    pub waiters: Vec<Request>,
    pub used: bool,
    pub counted: bool,
}

#[derive(Clone, Debug)]
pub struct PrefetchQueue {
    pub capacity: usize,
    pub drop_threshold: f64,
    entries: HashMap<u64, QueueEntry>,
}

impl PrefetchQueue {
    pub fn new(capacity: usize, drop_threshold: f64) -> Self {
        PrefetchQueue {
            capacity,
            drop_threshold,
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, block: u64) -> bool {
        self.entries.contains_key(&block)
    }

    /// At or past the drop threshold.
    pub fn saturated(&self) -> bool {
        self.entries.len() >= self.capacity
            || self.entries.len() as f64 >= self.drop_threshold * self.capacity as f64
    }

    fn insert(&mut self, block: u64, entry: QueueEntry) {
        debug_assert!(self.entries.len() < self.capacity);
        let prev = self.entries.insert(block, entry);
        debug_assert!(prev.is_none());
    }

    fn get_mut(&mut self, block: u64) -> Option<&mut QueueEntry> {
        self.entries.get_mut(&block)
    }

    fn remove(&mut self, block: u64) -> Option<QueueEntry> {
        self.entries.remove(&block)
    }
}

/// How a read miss was served.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    DramCache,
    Merged,
    Fam,
    Local,
}

/// Work the simulation must carry out on behalf of the root complex.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    ToFam(Request),
    Complete {
        request: Request,
        at: SimTime,
        route: Route,
    },
}

#[derive(Clone, Copy, Debug)]
struct BlockInfo {
    used: bool,
    counted: bool,
    fill_seq: u64,
}

const ACCURACY_WINDOW: usize = 1024;

/// Used flags of the most recent fills.
#[derive(Clone, Debug, Default)]
struct AccuracyWindow {
    flags: VecDeque<bool>,
    base_seq: u64,
    used: usize,
}

impl AccuracyWindow {
    fn push(&mut self, used: bool) -> u64 {
        let seq = self.base_seq + self.flags.len() as u64;
        self.flags.push_back(used);
        self.used += used as usize;
        if self.flags.len() > ACCURACY_WINDOW {
            let old = self.flags.pop_front().expect("nonempty");
            self.used -= old as usize;
            self.base_seq += 1;
        }
        seq
    }

    fn mark(&mut self, seq: u64) {
        if seq < self.base_seq {
            return;
        }
        if let Some(f) = self.flags.get_mut((seq - self.base_seq) as usize) {
            if !*f {
                *f = true;
                self.used += 1;
            }
        }
    }

    fn accuracy(&self) -> f64 {
        if self.flags.is_empty() {
            1.0
        } else {
            self.used as f64 / self.flags.len() as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct RootComplex {
    pub node: u16,
    cfg: RcConfig,
    dcache: DcacheMeta,
    spp: SppState,
    queue: PrefetchQueue,
    adapt: Option<AdaptState>,
    local: MemBackend,
    fill_ready: HashMap<u64, SimTime>,
    blocks: HashMap<u64, BlockInfo>,
    window: AccuracyWindow,
    next_id: u64,
    warm: bool,
    pub stats: StatSet,
}

impl RootComplex {
    pub fn new(node: u16, cfg: RcConfig) -> Result<Self, SimError> {
        if cfg.spp.block_size != cfg.geometry.block_size {
            return Err(SimError::config(
                "block_size",
                "prefetcher and DRAM cache block sizes differ",
            ));
        }
        if cfg.queue_capacity == 0 {
            return Err(SimError::config("queue_capacity", "must be at least 1"));
        }
        if !(cfg.drop_threshold > 0.0 && cfg.drop_threshold <= 1.0) {
            return Err(SimError::config("drop_threshold", "must be in (0, 1]"));
        }
        Ok(RootComplex {
            node,
            dcache: DcacheMeta::new(cfg.geometry)?,
            spp: SppState::new(cfg.spp)?,
            queue: PrefetchQueue::new(cfg.queue_capacity, cfg.drop_threshold),
            adapt: cfg.adapt.enabled.then(|| AdaptState::new(cfg.adapt)),
            local: MemBackend::new(cfg.local),
            fill_ready: HashMap::new(),
            blocks: HashMap::new(),
            window: AccuracyWindow::default(),
            next_id: 0,
            warm: true,
            stats: StatSet::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &RcConfig {
        &self.cfg
    }

    pub fn dcache(&self) -> &DcacheMeta {
        &self.dcache
    }

    pub fn queue(&self) -> &PrefetchQueue {
        &self.queue
    }

    pub fn adapt(&self) -> Option<&AdaptState> {
        self.adapt.as_ref()
    }

    pub fn adapt_mut(&mut self) -> Option<&mut AdaptState> {
        self.adapt.as_mut()
    }

    pub fn spp(&self) -> &SppState {
        &self.spp
    }

    /// Prefetches issued while not warm are left out of the usefulness
    /// count.
    pub fn set_warm(&mut self, warm: bool) {
        self.warm = warm;
    }

    /// Used fraction over the most recent fills; 1 before any fill.
    pub fn accuracy(&self) -> f64 {
        self.window.accuracy()
    }

    pub fn next_request_id(&mut self) -> u64 {
        let id = ((self.node as u64) << 48) | self.next_id;
        self.next_id += 1;
        id
    }

    fn block_of(&self, address: u64) -> u64 {
        address & !(self.cfg.geometry.block_size - 1)
    }

    /// Reads and writes to node-local pages.
    pub fn local_access(&mut self, req: Request, now: SimTime) -> Action {
        let (_, done) = self.local.service(req.size, now);
        Action::Complete {
            request: req,
            at: done,
            route: Route::Local,
        }
    }

    fn note_use(&mut self, block: u64) {
        if let Some(info) = self.blocks.get_mut(&block) {
            if !info.used {
                info.used = true;
                self.window.mark(info.fill_seq);
                self.stats.dram_prefetch_used += 1;
                if info.counted {
                    self.stats.post_warmup_used += 1;
                }
            }
        }
    }

    /// Routes a demand or core-prefetch read that missed the LLC and
    /// targets FAM.
    pub fn handle_llc_miss(
        &mut self,
        req: Request,
        now: SimTime,
        out: &mut Vec<Action>,
    ) -> Result<Route, SimError> {
        debug_assert!(matches!(
            req.class,
            RequestClass::Demand | RequestClass::CorePrefetch
        ));
        let demand = req.class == RequestClass::Demand;
        let block = self.block_of(req.address);
        let address = req.address;
        let c = self.stats.class_mut(req.class);
        c.created += 1;
        c.issued += 1;
        if demand {
            self.stats.demand_lookups += 1;
        } else {
            self.stats.core_prefetch_lookups += 1;
        }

        let route = match self.dcache.lookup(block)? {
            Lookup::Hit { .. } => {
                if demand {
                    self.stats.demand_hits += 1;
                    self.note_use(block);
                } else {
                    self.stats.core_prefetch_hits += 1;
                }
                let mut start = now;
                if let Some(&ready) = self.fill_ready.get(&block) {
                    if ready <= now {
                        self.fill_ready.remove(&block);
                    } else {
                        start = ready;
                    }
                }
                let (_, done) = self.local.service(LINE_BYTES, start);
                out.push(Action::Complete {
                    request: req,
                    at: done,
                    route: Route::DramCache,
                });
                Route::DramCache
            }
            Lookup::Miss => match self.queue.get_mut(block) {
                Some(entry) => {
                    if demand {
                        entry.used = true;
                        self.stats.demand_merges += 1;
                    } else {
                        self.stats.core_prefetch_merges += 1;
                    }
                    entry.waiters.push(req);
                    Route::Merged
                }
                None => {
                    if let Some(a) = self.adapt.as_mut() {
                        if demand {
                            a.demand_issued.bump();
                        }
                    }
                    out.push(Action::ToFam(req));
                    Route::Fam
                }
            },
        };
        if let Some(a) = self.adapt.as_mut() {
            if demand {
                a.demand_total.bump();
            }
        }

        if self.cfg.prefetch {
            self.spp.train(address);
            let candidates = if self.cfg.geometry.block_size == PAGE_BYTES {
                // one block per page: no in-page deltas to learn, fetch the
                // touched page itself
                vec![PrefetchCandidate {
                    block_address: block,
                    confidence: 1.0,
                    depth: 0,
                }]
            } else {
                self.spp
                    .predict(address, self.cfg.degree, self.cfg.confidence_floor)
            };
            self.maybe_issue_prefetches(&candidates, now, out);
        }
        Ok(route)
    }

    /// Filters candidates and issues the survivors, most confident first.
    pub fn maybe_issue_prefetches(
        &mut self,
        candidates: &[PrefetchCandidate],
        now: SimTime,
        out: &mut Vec<Action>,
    ) -> usize {
        let mut order: Vec<&PrefetchCandidate> = candidates.iter().collect();
        order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let size = self.cfg.geometry.block_size;
        let mut issued = 0;
        for c in order {
            let block = c.block_address;
            self.stats.dram_prefetch_candidates += 1;
            self.stats.class_mut(RequestClass::DramPrefetch).created += 1;
            let drop = if self.dcache.contains(block) {
                Some(&mut self.stats.dropped_resident)
            } else if self.queue.contains(block) {
                Some(&mut self.stats.dropped_in_flight)
            } else if self.queue.saturated() {
                Some(&mut self.stats.dropped_queue_full)
            } else if self.adapt.as_ref().is_some_and(|a| a.tokens == 0) {
                Some(&mut self.stats.dropped_throttled)
            } else {
                None
            };
            if let Some(counter) = drop {
                *counter += 1;
                self.stats.class_mut(RequestClass::DramPrefetch).dropped += 1;
                continue;
            }
            if let Some(a) = self.adapt.as_mut() {
                a.tokens -= 1;
                a.prefetch_issued.bump();
            }
            let id = self.next_request_id();
            let req = Request::new(id, self.node, RequestClass::DramPrefetch, block, size, now);
            self.queue.insert(
                block,
                QueueEntry {
                    request: req.clone(),
                    waiters: Vec::new(),
                    used: false,
                    counted: self.warm,
                },
            );
            self.stats.dram_prefetch_issued += 1;
            if self.warm {
                self.stats.post_warmup_issued += 1;
            }
            self.stats.class_mut(RequestClass::DramPrefetch).issued += 1;
            out.push(Action::ToFam(req));
            issued += 1;
        }
        issued
    }

    /// A DRAM-cache prefetch came back: free its queue entry, release merged
    /// waiters and fill the cache.
    pub fn on_prefetch_response(
        &mut self,
        req: &Request,
        now: SimTime,
        out: &mut Vec<Action>,
    ) -> Result<(), SimError> {
        let block = req.address;
        let entry = self.queue.remove(block).ok_or_else(|| {
            SimError::config(
                "invariant",
                format!("prefetch response for unknown block {block:#x}"),
            )
        })?;
        self.stats.class_mut(RequestClass::DramPrefetch).completed += 1;
        for w in entry.waiters {
            out.push(Action::Complete {
                request: w,
                at: now,
                route: Route::Merged,
            });
        }
        let alloc = self.dcache.allocate(block, false)?;
        if let Some(ev) = alloc.evicted {
            self.fill_ready.remove(&ev.fam_block_address);
            if let Some(info) = self.blocks.remove(&ev.fam_block_address) {
                if !info.used {
                    self.stats.dram_prefetch_evicted_unused += 1;
                }
            }
            if ev.was_dirty {
                self.stats.dirty_evictions += 1;
                let id = self.next_request_id();
                let wb = Request::new(
                    id,
                    self.node,
                    RequestClass::EvictionWriteback,
                    ev.fam_block_address,
                    self.cfg.geometry.block_size,
                    now,
                );
                let c = self.stats.class_mut(RequestClass::EvictionWriteback);
                c.created += 1;
                c.issued += 1;
                out.push(Action::ToFam(wb));
            }
        }
        let (_, ready) = self.local.service(self.cfg.geometry.block_size, now);
        self.fill_ready.insert(block, ready);
        let fill_seq = self.window.push(entry.used);
        self.blocks.insert(
            block,
            BlockInfo {
                used: entry.used,
                counted: entry.counted,
                fill_seq,
            },
        );
        self.stats.dram_prefetch_filled += 1;
        if entry.used {
            self.stats.dram_prefetch_used += 1;
            if entry.counted {
                self.stats.post_warmup_used += 1;
            }
        }
        Ok(())
    }

    /// A demand or core-prefetch read returned from FAM.
    pub fn on_read_response(&mut self, req: Request, now: SimTime) -> Action {
        if req.class == RequestClass::Demand {
            if let Some(a) = self.adapt.as_mut() {
                a.record_return(now - req.t_created);
            }
        }
        Action::Complete {
            request: req,
            at: now,
            route: Route::Fam,
        }
    }

    /// An LLC writeback to a FAM page: absorbed by a resident block, else
    /// forwarded.
    pub fn handle_writeback(
        &mut self,
        req: Request,
        now: SimTime,
        out: &mut Vec<Action>,
    ) -> Result<(), SimError> {
        let block = self.block_of(req.address);
        let c = self.stats.class_mut(RequestClass::Writeback);
        c.created += 1;
        c.issued += 1;
        match self.dcache.write_hit(block)? {
            WriteOutcome::Updated => {
                self.stats.write_hits += 1;
                let (_, done) = self.local.service(req.size, now);
                out.push(Action::Complete {
                    request: req,
                    at: done,
                    route: Route::DramCache,
                });
            }
            WriteOutcome::Miss => {
                out.push(Action::ToFam(req));
            }
        }
        Ok(())
    }

    /// One adaptation sample; `None` when adaptation is off.
    pub fn sampling_tick(&mut self) -> Option<f64> {
        let accuracy = self.window.accuracy();
        let a = self.adapt.as_mut()?;
        let rate = a.sampling_tick(accuracy);
        self.stats.adapt_samples = a.samples;
        self.stats.adapt_decreases = a.decreases;
        self.stats.final_issue_rate = rate;
        Some(rate)
    }

    /// Dedup audit: nothing in flight is also resident.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.queue.len() > self.queue.capacity {
            return Err(format!(
                "queue holds {} > {}",
                self.queue.len(),
                self.queue.capacity
            ));
        }
        for block in self.queue.entries.keys() {
            if self.dcache.contains(*block) {
                return Err(format!("block {block:#x} both resident and in flight"));
            }
        }
        self.dcache.check_invariants()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RcConfig {
        RcConfig::default()
    }

    fn demand(rc: &mut RootComplex, addr: u64, now: SimTime) -> Request {
        let id = rc.next_request_id();
        Request::new(id, 0, RequestClass::Demand, addr, 64, now)
    }

    fn sent(out: &[Action]) -> Vec<&Request> {
        out.iter()
            .filter_map(|a| match a {
                Action::ToFam(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn cold_miss_goes_to_fam() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        let r = demand(&mut rc, 0x10_0000, SimTime::ZERO);
        assert_eq!(
            rc.handle_llc_miss(r, SimTime::ZERO, &mut out).unwrap(),
            Route::Fam
        );
        assert_eq!(sent(&out).len(), 1);
    }

    #[test]
    fn stride_generates_prefetches() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        for i in 0..12u64 {
            let r = demand(&mut rc, 0x10_0000 + i * 256, SimTime::ZERO);
            rc.handle_llc_miss(r, SimTime::ZERO, &mut out).unwrap();
        }
        let pf = sent(&out)
            .iter()
            .filter(|r| r.class == RequestClass::DramPrefetch)
            .count();
        assert!(pf > 0);
        rc.check_invariants().unwrap();
    }

    fn candidate(block: u64, confidence: f64) -> PrefetchCandidate {
        PrefetchCandidate {
            block_address: block,
            confidence,
            depth: 1,
        }
    }

    #[test]
    fn resident_candidate_is_dropped() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x1000, 0.9)], SimTime::ZERO, &mut out);
        let req = sent(&out)[0].clone();
        rc.on_prefetch_response(&req, SimTime(1), &mut out).unwrap();
        let mut out = vec![];
        assert_eq!(
            rc.maybe_issue_prefetches(&[candidate(0x1000, 0.9)], SimTime(2), &mut out),
            0
        );
        assert_eq!(rc.stats.dropped_resident, 1);
    }

    #[test]
    fn in_flight_candidate_is_dropped() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        assert_eq!(
            rc.maybe_issue_prefetches(
                &[candidate(0x1000, 0.9), candidate(0x1000, 0.8)],
                SimTime::ZERO,
                &mut out
            ),
            1
        );
        assert_eq!(rc.stats.dropped_in_flight, 1);
    }

    #[test]
    fn drop_threshold_blocks_issue() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        let fill: Vec<_> = (0..243u64).map(|i| candidate(i * 256, 0.9)).collect();
        assert_eq!(
            rc.maybe_issue_prefetches(&fill, SimTime::ZERO, &mut out),
            243
        );
        // 243 < 243.2: one more fits
        assert_eq!(
            rc.maybe_issue_prefetches(&[candidate(243 * 256, 0.9)], SimTime::ZERO, &mut out),
            1
        );
        assert_eq!(rc.queue().len(), 244);
        let more: Vec<_> = (300..304u64).map(|i| candidate(i * 256, 0.9)).collect();
        assert_eq!(rc.maybe_issue_prefetches(&more, SimTime::ZERO, &mut out), 0);
        assert_eq!(rc.stats.dropped_queue_full, 4);
    }

    #[test]
    fn token_budget_keeps_most_confident() {
        let mut c = cfg();
        c.adapt.enabled = true;
        c.adapt.initial_rate = 2.0;
        let mut rc = RootComplex::new(0, c).unwrap();
        let mut out = vec![];
        let cands = [
            candidate(0x100, 0.3),
            candidate(0x200, 0.9),
            candidate(0x300, 0.5),
            candidate(0x400, 0.7),
        ];
        assert_eq!(
            rc.maybe_issue_prefetches(&cands, SimTime::ZERO, &mut out),
            2
        );
        let blocks: Vec<u64> = sent(&out).iter().map(|r| r.address).collect();
        assert_eq!(blocks, vec![0x200, 0x400]);
        assert_eq!(rc.stats.dropped_throttled, 2);
    }

    #[test]
    fn merge_completes_with_prefetch() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x2000, 0.9)], SimTime::ZERO, &mut out);
        let pf = sent(&out)[0].clone();
        let d = demand(&mut rc, 0x2040, SimTime::from_ns(10));
        let mut out = vec![];
        assert_eq!(
            rc.handle_llc_miss(d, SimTime::from_ns(10), &mut out)
                .unwrap(),
            Route::Merged
        );
        let mut out = vec![];
        let t = SimTime::from_ns(400);
        rc.on_prefetch_response(&pf, t, &mut out).unwrap();
        let done: Vec<_> = out
            .iter()
            .filter_map(|a| match a {
                Action::Complete { at, route, .. } => Some((*at, *route)),
                _ => None,
            })
            .collect();
        assert_eq!(done, vec![(t, Route::Merged)]);
        assert_eq!(rc.stats.dram_prefetch_used, 1);
    }

    #[test]
    fn hit_waits_for_fill_then_pays_local_latency() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x3000, 0.9)], SimTime::ZERO, &mut out);
        let pf = sent(&out)[0].clone();
        rc.on_prefetch_response(&pf, SimTime::from_ns(300), &mut out)
            .unwrap();
        let now = SimTime::from_us(2);
        let d = demand(&mut rc, 0x3000, now);
        let mut out = vec![];
        assert_eq!(
            rc.handle_llc_miss(d, now, &mut out).unwrap(),
            Route::DramCache
        );
        let Action::Complete { at, .. } = out[0] else {
            panic!("expected completion")
        };
        // 45 ns access + 64 B at 25.6 GB/s
        assert_eq!(at - now, SimTime(45_000 + 2_500));
    }

    #[test]
    fn dirty_victim_is_written_back() {
        let mut c = cfg();
        c.geometry = DcacheGeometry {
            capacity: 256,
            block_size: 256,
            ways: 1,
        };
        let mut rc = RootComplex::new(0, c).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x0, 0.9)], SimTime::ZERO, &mut out);
        let a = sent(&out)[0].clone();
        rc.on_prefetch_response(&a, SimTime(10), &mut out).unwrap();
        let wb = Request::new(99, 0, RequestClass::Writeback, 0x40, 64, SimTime(20));
        let mut out = vec![];
        rc.handle_writeback(wb, SimTime(20), &mut out).unwrap();
        assert_eq!(rc.stats.write_hits, 1);
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x100, 0.9)], SimTime(30), &mut out);
        let b = sent(&out)[0].clone();
        let mut out = vec![];
        rc.on_prefetch_response(&b, SimTime(40), &mut out).unwrap();
        let wbs = sent(&out);
        assert_eq!(wbs.len(), 1);
        assert_eq!(wbs[0].class, RequestClass::EvictionWriteback);
        assert_eq!(wbs[0].address, 0);
        assert_eq!(wbs[0].size, 256);
    }

    #[test]
    fn clean_victim_is_silent() {
        let mut c = cfg();
        c.geometry = DcacheGeometry {
            capacity: 256,
            block_size: 256,
            ways: 1,
        };
        let mut rc = RootComplex::new(0, c).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x0, 0.9)], SimTime::ZERO, &mut out);
        let a = sent(&out)[0].clone();
        rc.on_prefetch_response(&a, SimTime(10), &mut out).unwrap();
        let mut out = vec![];
        rc.maybe_issue_prefetches(&[candidate(0x100, 0.9)], SimTime(30), &mut out);
        let b = sent(&out)[0].clone();
        let mut out = vec![];
        rc.on_prefetch_response(&b, SimTime(40), &mut out).unwrap();
        assert!(sent(&out).is_empty());
        assert_eq!(rc.stats.dram_prefetch_evicted_unused, 1);
    }

    #[test]
    fn unknown_response_is_an_error() {
        let mut rc = RootComplex::new(0, cfg()).unwrap();
        let r = Request::new(1, 0, RequestClass::DramPrefetch, 0x5000, 256, SimTime::ZERO);
        assert!(rc
            .on_prefetch_response(&r, SimTime(1), &mut vec![])
            .is_err());
    }

    #[test]
    fn decrease_factor_examples() {
        assert_eq!(decrease_factor(2.5, 1.0, 0.0, 0.5, 1.25), 0.5);
        assert_eq!(decrease_factor(2.5, 1.0, 1.0, 0.5, 1.25), 1.0);
        assert_eq!(decrease_factor(1.1, 1.0, 0.0, 0.5, 1.25), 1.0);
        // halfway into the band, half-accurate: 1 - 0.5 * 0.5 * 0.5
        assert!((decrease_factor(1.875, 1.0, 0.5, 0.5, 1.25) - 0.875).abs() < 1e-12);
    }

    fn adapt_with(latencies: &[u64]) -> AdaptState {
        let mut a = AdaptState::new(AdaptConfig {
            enabled: true,
            ..Default::default()
        });
        for &l in latencies {
            a.record_return(SimTime(l));
        }
        a
    }

    #[test]
    fn quiet_sample_increases_rate() {
        let mut a = adapt_with(&[1000]);
        let r0 = a.issue_rate;
        a.sampling_tick(0.0);
        assert_eq!(a.issue_rate, r0 * 1.125);
        a.record_return(SimTime(1100));
        a.sampling_tick(0.0);
        assert_eq!(a.issue_rate, r0 * 1.125 * 1.125);
    }

    #[test]
    fn congested_sample_decreases_by_accuracy() {
        let mut a = adapt_with(&[1000]);
        a.sampling_tick(0.0);
        let r = a.issue_rate;
        // EMA jumps to 0.25 * 7000 + 0.75 * 1000 = 2500 = 2.5 * L_min
        a.record_return(SimTime(7000));
        a.sampling_tick(0.0);
        assert_eq!(a.issue_rate, r * 0.5);
        let mut b = adapt_with(&[1000]);
        b.sampling_tick(1.0);
        b.record_return(SimTime(7000));
        b.sampling_tick(1.0);
        assert_eq!(b.issue_rate, r);
    }

    #[test]
    fn rate_is_clamped_and_idle_samples_hold() {
        let mut a = adapt_with(&[]);
        let r = a.issue_rate;
        a.sampling_tick(0.0);
        assert_eq!(a.issue_rate, r);
        for _ in 0..200 {
            a.record_return(SimTime(1000));
            a.sampling_tick(0.0);
        }
        assert_eq!(a.issue_rate, a.cfg.rate_max);
        assert_eq!(a.tokens, a.cfg.rate_max as u64);
    }

    #[test]
    fn accuracy_window_tracks_recent_fills() {
        let mut w = AccuracyWindow::default();
        assert_eq!(w.accuracy(), 1.0);
        let first = w.push(false);
        w.push(true);
        assert_eq!(w.accuracy(), 0.5);
        w.mark(first);
        assert_eq!(w.accuracy(), 1.0);
        for _ in 0..ACCURACY_WINDOW {
            w.push(false);
        }
        w.mark(first);
        assert_eq!(w.accuracy(), 0.0);
    }
}

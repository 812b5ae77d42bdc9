//! One simulated system: N nodes, each with a core, a root complex and a
//! private link, sharing one FAM endpoint.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use crate::config::{git_blob_hash, ExperimentConfig};
use crate::engine::{ComponentId, Scheduler, SimTime};
use crate::error::SimError;
use crate::fabric::{Direction, Link, LinkConfig, Packet};
use crate::famnode::FamNode;
use crate::metrics::{RunSummary, StatSet};
use crate::request::{line_of, Request, RequestClass, LINE_BYTES};
use crate::rootcomplex::{Action, RootComplex, Route};
use crate::spp::{SppConfig, SppState};
use crate::workload::{
    load_trace, AccessKind, AccessRecord, AccessSource, AddressMap, CoreModel, Fingerprint,
    Placement, SyntheticSource, TraceSource,
};

#[derive(Clone, Debug)]
pub enum Msg {
    CoreWake,
    Done { request: Request, route: Route },
    FamArrive(Request),
    FamTick,
    BackendDone(Request),
    Response(Request),
    Sample,
}

const CORE_BUFFER_LINES: usize = 512;
const CORE_PREFETCH_FLOOR: f64 = 0.25;

/// Line-granular prefetcher in front of the LLC. Lines it fetched are kept
/// in a small FIFO buffer that stands in for LLC residency.
#[derive(Clone, Debug)]
struct CorePrefetcher {
    spp: SppState,
    degree: usize,
    lines: HashSet<u64>,
    order: VecDeque<u64>,
    /// In-flight lines and the demand reads waiting on them.
    in_flight: HashMap<u64, Vec<Request>>,
    max_outstanding: usize,
}

impl CorePrefetcher {
    fn new(degree: usize, max_outstanding: usize) -> Result<Self, SimError> {
        Ok(CorePrefetcher {
            spp: SppState::new(SppConfig::with_block_size(LINE_BYTES))?,
            degree,
            lines: HashSet::new(),
            order: VecDeque::new(),
            in_flight: HashMap::new(),
            max_outstanding,
        })
    }

    fn fill(&mut self, line: u64) {
        if self.lines.insert(line) {
            self.order.push_back(line);
            if self.order.len() > CORE_BUFFER_LINES {
                let old = self.order.pop_front().expect("nonempty");
                self.lines.remove(&old);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    source: AccessSource,
    dependent: bool,
    core: CoreModel,
    budget: u64,
    issued: u64,
    warmup: u64,
    outstanding: usize,
    next_issue: SimTime,
    wake_pending: bool,
    done: bool,
    rc: RootComplex,
    link: Link,
    core_pf: Option<CorePrefetcher>,
    fingerprint: Fingerprint,
}

pub struct Simulation {
    cfg: ExperimentConfig,
    sched: Scheduler<Msg>,
    nodes: Vec<Node>,
    fam: FamNode,
    map: AddressMap,
    link_cfg: LinkConfig,
    active: usize,
    input_hash: String,
    audit_every: u64,
    actions: Vec<Action>,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut input = cfg.canonical().into_bytes();
        let trace = match &cfg.trace {
            Some(path) => {
                let (records, text) = load_trace(Path::new(path))?;
                input.extend_from_slice(text.as_bytes());
                Some(records)
            }
            None => None,
        };
        let mut nodes = Vec::with_capacity(cfg.nodes);
        for n in 0..cfg.nodes {
            let id = n as u16;
            let source = match &trace {
                Some(records) => AccessSource::Trace(TraceSource::for_node(records, id)),
                None => AccessSource::Synthetic(Box::new(SyntheticSource::new(
                    id,
                    &cfg.generator(n)?,
                    cfg.footprint_bytes,
                    cfg.write_fraction,
                    cfg.seed,
                ))),
            };
            let budget = match &source {
                AccessSource::Trace(t) => cfg.duration_accesses.min(t.len() as u64),
                AccessSource::Synthetic(_) => cfg.duration_accesses,
            };
            let mut rc = RootComplex::new(id, cfg.root_complex())?;
            rc.set_warm(cfg.warmup_accesses == 0);
            let core_pf = if cfg.core_prefetch {
                Some(CorePrefetcher::new(
                    cfg.core_prefetch_degree,
                    cfg.max_outstanding,
                )?)
            } else {
                None
            };
            nodes.push(Node {
                dependent: source.dependent(),
                source,
                core: cfg.core_model(),
                budget,
                issued: 0,
                warmup: cfg.warmup_accesses,
                outstanding: 0,
                next_issue: SimTime::ZERO,
                wake_pending: false,
                done: false,
                rc,
                link: Link::new(cfg.link()),
                core_pf,
                fingerprint: Fingerprint::default(),
            });
        }
        Ok(Simulation {
            cfg: cfg.clone(),
            sched: Scheduler::new(),
            active: nodes.len(),
            nodes,
            fam: FamNode::new(cfg.scheduler, cfg.dwrr(), cfg.fam_backend()),
            map: AddressMap::new(cfg.allocation_ratio, cfg.seed),
            link_cfg: cfg.link(),
            input_hash: git_blob_hash(&input),
            audit_every: 0,
            actions: Vec::new(),
        })
    }

    /// Checks structural invariants every `every` events (0 disables).
    pub fn set_audit(&mut self, every: u64) {
        self.audit_every = every;
    }

    fn at(&mut self, t: SimTime, target: ComponentId, msg: Msg) -> Result<(), SimError> {
        self.sched.schedule(t, target, msg).map(|_| ())
    }

    pub fn run(mut self) -> Result<RunSummary, SimError> {
        for n in 0..self.nodes.len() {
            self.at(SimTime::ZERO, ComponentId::Node(n as u16), Msg::CoreWake)?;
            self.nodes[n].wake_pending = true;
            if self.cfg.adaptation {
                let p = SimTime(self.cfg.sampling_period_ps);
                self.at(p, ComponentId::Node(n as u16), Msg::Sample)?;
            }
        }
        while self.active > 0 {
            let Some(ev) = self.sched.pop() else {
                return Err(SimError::config(
                    "invariant",
                    "event queue drained with nodes still active",
                ));
            };
            let now = ev.fire_time;
            match ev.target {
                ComponentId::Node(n) => self.node_event(n as usize, ev.payload, now)?,
                ComponentId::Fam => self.fam_event(ev.payload, now)?,
            }
            if self.audit_every > 0 && self.sched.dispatched().is_multiple_of(self.audit_every) {
                self.audit()?;
            }
        }
        Ok(self.finish())
    }

    fn audit(&self) -> Result<(), SimError> {
        for node in &self.nodes {
            node.rc
                .check_invariants()
                .map_err(|e| SimError::config("invariant", e))?;
            if node.outstanding > node.core.max_outstanding {
                return Err(SimError::config(
                    "invariant",
                    "outstanding reads above the core bound",
                ));
            }
        }
        Ok(())
    }

    fn finish(mut self) -> RunSummary {
        let end = self.sched.now();
        self.fam.finish(end);
        let mut total = StatSet::default();
        let mut per_node = Vec::with_capacity(self.nodes.len());
        let mut fp: Option<Fingerprint> = None;
        for node in &mut self.nodes {
            let s = &mut node.rc.stats;
            s.link_bytes_to_fam = node.link.to_fam.stats().bytes;
            s.link_packets_to_fam = node.link.to_fam.stats().packets;
            s.link_bytes_to_host = node.link.to_host.stats().bytes;
            s.link_packets_to_host = node.link.to_host.stats().packets;
            total.merge(s);
            per_node.push(s.clone());
            fp = Some(match fp {
                None => node.fingerprint,
                Some(f) => f.combine(node.fingerprint),
            });
        }
        let fam = self.fam.stats();
        RunSummary {
            seed: self.cfg.seed,
            nodes: self.nodes.len(),
            config_fingerprint: self.cfg.fingerprint(),
            input_hash: self.input_hash.clone(),
            workload_fingerprint: fp.map_or(0, |f| f.0),
            end_time: end,
            events: self.sched.dispatched(),
            stats: total,
            per_node,
            fam_mean_queue_depth: fam.mean_queue_depth(end),
            fam_max_queue: fam.max_queue,
            fam_served_bytes: fam.served_bytes,
        }
    }

    fn node_event(&mut self, n: usize, msg: Msg, now: SimTime) -> Result<(), SimError> {
        match msg {
            Msg::CoreWake => {
                self.nodes[n].wake_pending = false;
                self.try_issue(n, now)
            }
            Msg::Done { request, route } => self.complete(n, request, route, now),
            Msg::Response(req) => self.response(n, req, now),
            Msg::Sample => {
                if !self.nodes[n].done {
                    self.nodes[n].rc.sampling_tick();
                    let next = now + SimTime(self.cfg.sampling_period_ps);
                    self.at(next, ComponentId::Node(n as u16), Msg::Sample)?;
                }
                Ok(())
            }
            other => Err(SimError::config("invariant", format!("node got {other:?}"))),
        }
    }

    fn fam_event(&mut self, msg: Msg, now: SimTime) -> Result<(), SimError> {
        match msg {
            Msg::FamArrive(req) => {
                if let Some(t) = self.fam.arrive(req, now) {
                    self.at(t, ComponentId::Fam, Msg::FamTick)?;
                }
            }
            Msg::FamTick => {
                let (issued, next) = self.fam.tick(now);
                if let Some((req, done)) = issued {
                    self.at(done, ComponentId::Fam, Msg::BackendDone(req))?;
                }
                if let Some(t) = next {
                    self.at(t, ComponentId::Fam, Msg::FamTick)?;
                }
            }
            Msg::BackendDone(req) => {
                let n = req.node;
                let wire = self.link_cfg.wire_size(&req, Direction::ToHost);
                let pkt = Packet {
                    request_id: req.id,
                    wire_bytes: wire,
                };
                let t = self.nodes[n as usize].link.to_host.transmit(pkt, now);
                self.at(t, ComponentId::Node(n), Msg::Response(req))?;
            }
            other => return Err(SimError::config("invariant", format!("FAM got {other:?}"))),
        }
        Ok(())
    }

    fn schedule_wake(&mut self, n: usize, at: SimTime) -> Result<(), SimError> {
        if !self.nodes[n].wake_pending {
            self.nodes[n].wake_pending = true;
            self.at(at, ComponentId::Node(n as u16), Msg::CoreWake)?;
        }
        Ok(())
    }

    fn try_issue(&mut self, n: usize, now: SimTime) -> Result<(), SimError> {
        let node = &mut self.nodes[n];
        if node.done {
            return Ok(());
        }
        if node.issued >= node.budget {
            if node.outstanding == 0 {
                node.done = true;
                self.active -= 1;
            }
            return Ok(());
        }
        if node.outstanding >= node.core.max_outstanding || (node.dependent && node.outstanding > 0)
        {
            return Ok(());
        }
        if now < node.next_issue {
            let t = node.next_issue;
            return self.schedule_wake(n, t);
        }
        let Some(rec) = node.source.next_access() else {
            node.budget = node.issued;
            return self.try_issue(n, now);
        };
        node.fingerprint.absorb(&rec);
        node.issued += 1;
        if node.warmup > 0 && node.issued == node.warmup {
            node.rc.set_warm(true);
        }
        node.next_issue = now + node.core.issue_gap;
        self.issue(n, rec, now)?;
        let t = self.nodes[n].next_issue;
        self.schedule_wake(n, t)
    }

    fn issue(&mut self, n: usize, rec: AccessRecord, now: SimTime) -> Result<(), SimError> {
        let placement = self.map.classify(rec.address);
        let mut out = std::mem::take(&mut self.actions);
        let node = &mut self.nodes[n];
        let id = node.rc.next_request_id();
        match rec.kind {
            AccessKind::Write => {
                node.rc.stats.writes += 1;
                let req = Request::new(
                    id,
                    rec.node,
                    RequestClass::Writeback,
                    line_of(rec.address),
                    LINE_BYTES,
                    now,
                );
                match placement {
                    Placement::Local => {
                        node.rc.stats.local_writes += 1;
                        out.push(node.rc.local_access(req, now));
                    }
                    Placement::Fam => node.rc.handle_writeback(req, now, &mut out)?,
                }
            }
            AccessKind::Read => {
                node.rc.stats.reads += 1;
                let line = line_of(rec.address);
                let req = Request::new(
                    id,
                    rec.node,
                    RequestClass::Demand,
                    rec.address,
                    LINE_BYTES,
                    now,
                );
                let buffered = node.core_pf.as_mut().and_then(|pf| {
                    if pf.lines.contains(&line) {
                        Some(None)
                    } else {
                        pf.in_flight.get_mut(&line).map(Some)
                    }
                });
                match buffered {
                    Some(None) => node.rc.stats.core_buffer_hits += 1,
                    Some(Some(waiters)) => {
                        waiters.push(req);
                        node.outstanding += 1;
                        node.rc.stats.core_buffer_hits += 1;
                    }
                    None => {
                        node.outstanding += 1;
                        match placement {
                            Placement::Local => {
                                node.rc.stats.local_reads += 1;
                                out.push(node.rc.local_access(req, now));
                            }
                            Placement::Fam => {
                                node.rc.handle_llc_miss(req, now, &mut out)?;
                            }
                        }
                    }
                }
                debug_assert!(node.outstanding <= node.core.max_outstanding);
                self.core_prefetch(n, rec.address, now, &mut out)?;
            }
        }
        self.apply(n, &mut out, now)?;
        self.actions = out;
        Ok(())
    }

    fn core_prefetch(
        &mut self,
        n: usize,
        address: u64,
        now: SimTime,
        out: &mut Vec<Action>,
    ) -> Result<(), SimError> {
        let map = self.map;
        let node = &mut self.nodes[n];
        let Some(pf) = node.core_pf.as_mut() else {
            return Ok(());
        };
        pf.spp.train(address);
        for c in pf.spp.predict(address, pf.degree, CORE_PREFETCH_FLOOR) {
            let line = c.block_address;
            if pf.lines.contains(&line) || pf.in_flight.contains_key(&line) {
                continue;
            }
            if map.classify(line) == Placement::Local {
                continue;
            }
            let class = node.rc.stats.class_mut(RequestClass::CorePrefetch);
            if pf.in_flight.len() >= pf.max_outstanding {
                class.created += 1;
                class.dropped += 1;
                continue;
            }
            pf.in_flight.insert(line, Vec::new());
            let id = node.rc.next_request_id();
            let req = Request::new(
                id,
                n as u16,
                RequestClass::CorePrefetch,
                line,
                LINE_BYTES,
                now,
            );
            node.rc.handle_llc_miss(req, now, out)?;
        }
        Ok(())
    }

    fn apply(&mut self, n: usize, out: &mut Vec<Action>, now: SimTime) -> Result<(), SimError> {
        for a in out.drain(..) {
            match a {
                Action::ToFam(req) => {
                    let wire = self.link_cfg.wire_size(&req, Direction::ToFam);
                    let pkt = Packet {
                        request_id: req.id,
                        wire_bytes: wire,
                    };
                    let t = self.nodes[n].link.to_fam.transmit(pkt, now);
                    self.sched
                        .schedule(t, ComponentId::Fam, Msg::FamArrive(req))?;
                }
                Action::Complete { request, at, route } => {
                    self.sched.schedule(
                        at,
                        ComponentId::Node(n as u16),
                        Msg::Done { request, route },
                    )?;
                }
            }
        }
        Ok(())
    }

    fn response(&mut self, n: usize, req: Request, now: SimTime) -> Result<(), SimError> {
        match req.class {
            RequestClass::Demand | RequestClass::CorePrefetch => {
                let Action::Complete { request, route, .. } =
                    self.nodes[n].rc.on_read_response(req, now)
                else {
                    unreachable!("read responses complete in place")
                };
                self.complete(n, request, route, now)
            }
            RequestClass::DramPrefetch => {
                let mut out = std::mem::take(&mut self.actions);
                self.nodes[n].rc.on_prefetch_response(&req, now, &mut out)?;
                self.apply(n, &mut out, now)?;
                self.actions = out;
                Ok(())
            }
            RequestClass::Writeback | RequestClass::EvictionWriteback => {
                self.nodes[n].rc.stats.class_mut(req.class).completed += 1;
                Ok(())
            }
        }
    }

    fn complete(
        &mut self,
        n: usize,
        req: Request,
        route: Route,
        now: SimTime,
    ) -> Result<(), SimError> {
        let node = &mut self.nodes[n];
        let latency = now - req.t_created;
        match req.class {
            RequestClass::Demand => {
                let s = &mut node.rc.stats;
                if route == Route::Local {
                    s.local_latency.record(latency);
                } else {
                    s.demand_latency.record(latency);
                    if route == Route::Fam {
                        s.demand_fam_latency.record(latency);
                    }
                    s.class_mut(RequestClass::Demand).completed += 1;
                }
                node.outstanding -= 1;
            }
            RequestClass::CorePrefetch => {
                let s = &mut node.rc.stats;
                s.core_prefetch_latency.record(latency);
                s.class_mut(RequestClass::CorePrefetch).completed += 1;
                if let Some(pf) = node.core_pf.as_mut() {
                    pf.fill(req.address);
                    let waiters = pf.in_flight.remove(&req.address).unwrap_or_default();
                    node.outstanding -= waiters.len();
                }
            }
            RequestClass::Writeback => {
                if route != Route::Local {
                    node.rc.stats.class_mut(RequestClass::Writeback).completed += 1;
                }
            }
            c => {
                return Err(SimError::config(
                    "invariant",
                    format!("{} completed at the core", c.name()),
                ))
            }
        }
        self.try_issue(n, now)
    }
}

/// Builds and runs one experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary, SimError> {
    Simulation::new(cfg)?.run()
}

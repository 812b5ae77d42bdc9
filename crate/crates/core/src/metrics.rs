//! Run statistics and the figures of merit derived from them.
//!
//! A [`Report`] is a flat, ordered list of named values. The same list is
//! rendered as JSON or CSV so the two formats always agree.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Number, Value};

use crate::engine::SimTime;
use crate::error::SimError;
use crate::request::RequestClass;

pub const SCHEMA_VERSION: u32 = 1;

const BUCKETS: usize = 64;
const HIST_LO_NS: f64 = 10.0;
const HIST_HI_NS: f64 = 100_000.0;

/// Log-spaced latency histogram, 10 ns to 100 us; out-of-range samples
/// land in the edge buckets.
#[derive(Clone, Debug)]
pub struct LatencyHistogram {
    counts: [u64; BUCKETS],
    total: u64,
    sum_ps: u128,
    min: Option<SimTime>,
    max: SimTime,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            counts: [0; BUCKETS],
            total: 0,
            sum_ps: 0,
            min: None,
            max: SimTime::ZERO,
        }
    }
}

impl LatencyHistogram {
    fn bucket_of(ns: f64) -> usize {
        if ns <= HIST_LO_NS {
            return 0;
        }
        let pos = (ns / HIST_LO_NS).ln() / (HIST_HI_NS / HIST_LO_NS).ln() * BUCKETS as f64;
        (pos as usize).min(BUCKETS - 1)
    }

    /// Upper edge of bucket `i` in ns.
    pub fn bucket_upper_ns(i: usize) -> f64 {
        HIST_LO_NS * (HIST_HI_NS / HIST_LO_NS).powf((i + 1) as f64 / BUCKETS as f64)
    }

    pub fn record(&mut self, latency: SimTime) {
        self.counts[Self::bucket_of(latency.as_ns_f64())] += 1;
        self.total += 1;
        self.sum_ps += latency.as_ps() as u128;
        self.min = Some(self.min.map_or(latency, |m| m.min(latency)));
        self.max = self.max.max(latency);
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn mean_ns(&self) -> Option<f64> {
        (self.total > 0).then(|| self.sum_ps as f64 / self.total as f64 / 1_000.0)
    }

    pub fn max(&self) -> SimTime {
        self.max
    }

    /// Upper bucket edge below which fraction `q` of samples fall.
    pub fn quantile_ns(&self, q: f64) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let target = (q * self.total as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= target {
                return Some(Self::bucket_upper_ns(i));
            }
        }
        Some(Self::bucket_upper_ns(BUCKETS - 1))
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        self.total += other.total;
        self.sum_ps += other.sum_ps;
        self.min = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max = self.max.max(other.max);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub created: u64,
    /// Accepted for service by any path; the rest were dropped.
    pub issued: u64,
    pub completed: u64,
    pub dropped: u64,
}

impl ClassCounts {
    fn merge(&mut self, o: &ClassCounts) {
        self.created += o.created;
        self.issued += o.issued;
        self.completed += o.completed;
        self.dropped += o.dropped;
    }

    pub fn in_flight(&self) -> u64 {
        self.created - self.completed - self.dropped
    }
}

#[derive(Clone, Debug, Default)]
pub struct StatSet {
    /// FAM-bound traffic only, indexed by [`RequestClass::index`].
    pub classes: [ClassCounts; 5],

    pub reads: u64,
    pub writes: u64,
    pub local_reads: u64,
    pub local_writes: u64,

    /// Every FAM-bound demand read, whichever path served it.
    pub demand_latency: LatencyHistogram,
    /// Demand reads that went all the way to FAM.
    pub demand_fam_latency: LatencyHistogram,
    pub local_latency: LatencyHistogram,
    pub core_prefetch_latency: LatencyHistogram,

    pub demand_lookups: u64,
    pub demand_hits: u64,
    pub demand_merges: u64,
    pub core_prefetch_lookups: u64,
    pub core_prefetch_hits: u64,
    pub core_prefetch_merges: u64,
    /// Demand reads absorbed by a line the core prefetcher already fetched.
    pub core_buffer_hits: u64,

    pub dram_prefetch_candidates: u64,
    pub dram_prefetch_issued: u64,
    pub dram_prefetch_filled: u64,
    pub dram_prefetch_used: u64,
    pub dram_prefetch_evicted_unused: u64,
    pub dropped_resident: u64,
    pub dropped_in_flight: u64,
    pub dropped_queue_full: u64,
    pub dropped_throttled: u64,
    pub post_warmup_issued: u64,
    pub post_warmup_used: u64,

    pub write_hits: u64,
    pub dirty_evictions: u64,

    pub link_bytes_to_fam: u64,
    pub link_bytes_to_host: u64,
    pub link_packets_to_fam: u64,
    pub link_packets_to_host: u64,

    pub adapt_samples: u64,
    pub adapt_decreases: u64,
    pub final_issue_rate: f64,
}

impl StatSet {
    pub fn class(&self, c: RequestClass) -> &ClassCounts {
        &self.classes[c.index()]
    }

    pub fn class_mut(&mut self, c: RequestClass) -> &mut ClassCounts {
        &mut self.classes[c.index()]
    }

    pub fn merge(&mut self, o: &StatSet) {
        for (a, b) in self.classes.iter_mut().zip(o.classes.iter()) {
            a.merge(b);
        }
        self.reads += o.reads;
        self.writes += o.writes;
        self.local_reads += o.local_reads;
        self.local_writes += o.local_writes;
        self.demand_latency.merge(&o.demand_latency);
        self.demand_fam_latency.merge(&o.demand_fam_latency);
        self.local_latency.merge(&o.local_latency);
        self.core_prefetch_latency.merge(&o.core_prefetch_latency);
        self.demand_lookups += o.demand_lookups;
        self.demand_hits += o.demand_hits;
        self.demand_merges += o.demand_merges;
        self.core_prefetch_lookups += o.core_prefetch_lookups;
        self.core_prefetch_hits += o.core_prefetch_hits;
        self.core_prefetch_merges += o.core_prefetch_merges;
        self.core_buffer_hits += o.core_buffer_hits;
        self.dram_prefetch_candidates += o.dram_prefetch_candidates;
        self.dram_prefetch_issued += o.dram_prefetch_issued;
        self.dram_prefetch_filled += o.dram_prefetch_filled;
        self.dram_prefetch_used += o.dram_prefetch_used;
        self.dram_prefetch_evicted_unused += o.dram_prefetch_evicted_unused;
        self.dropped_resident += o.dropped_resident;
        self.dropped_in_flight += o.dropped_in_flight;
        self.dropped_queue_full += o.dropped_queue_full;
        self.dropped_throttled += o.dropped_throttled;
        self.post_warmup_issued += o.post_warmup_issued;
        self.post_warmup_used += o.post_warmup_used;
        self.write_hits += o.write_hits;
        self.dirty_evictions += o.dirty_evictions;
        self.link_bytes_to_fam += o.link_bytes_to_fam;
        self.link_bytes_to_host += o.link_bytes_to_host;
        self.link_packets_to_fam += o.link_packets_to_fam;
        self.link_packets_to_host += o.link_packets_to_host;
        self.adapt_samples += o.adapt_samples;
        self.adapt_decreases += o.adapt_decreases;
        self.final_issue_rate += o.final_issue_rate;
    }

    /// DRAM-cache hits over FAM-bound demand lookups; `None` when no demand
    /// ever targeted FAM.
    pub fn demand_hit_fraction(&self) -> Option<f64> {
        ratio(self.demand_hits, self.demand_lookups)
    }

    pub fn core_prefetch_hit_fraction(&self) -> Option<f64> {
        ratio(self.core_prefetch_hits, self.core_prefetch_lookups)
    }

    pub fn demand_merge_fraction(&self) -> Option<f64> {
        ratio(self.demand_merges, self.demand_lookups)
    }

    /// Fraction of post-warmup DRAM-cache prefetches that served a demand.
    pub fn prefetch_usefulness(&self) -> Option<f64> {
        ratio(self.post_warmup_used, self.post_warmup_issued)
    }

    pub fn mean_fam_latency_ns(&self) -> Option<f64> {
        self.demand_latency.mean_ns()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Mean FAM-bound demand latency of `run` over that of `baseline`.
pub fn relative_fam_latency(
    run: &RunSummary,
    baseline: &RunSummary,
) -> Result<Option<f64>, SimError> {
    if run.workload_fingerprint != baseline.workload_fingerprint {
        return Err(SimError::FingerprintMismatch(
            run.workload_fingerprint,
            baseline.workload_fingerprint,
        ));
    }
    Ok(
        match (
            run.stats.mean_fam_latency_ns(),
            baseline.stats.mean_fam_latency_ns(),
        ) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        },
    )
}

/// DRAM-cache prefetches issued by `run` over those of `reference`.
pub fn relative_prefetches_issued(run: &RunSummary, reference: &RunSummary) -> Option<f64> {
    ratio(
        run.stats.dram_prefetch_issued,
        reference.stats.dram_prefetch_issued,
    )
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub nodes: usize,
    pub config_fingerprint: String,
    pub input_hash: String,
    pub workload_fingerprint: u64,
    pub end_time: SimTime,
    pub events: u64,
    pub stats: StatSet,
    pub per_node: Vec<StatSet>,
    pub fam_mean_queue_depth: f64,
    pub fam_max_queue: usize,
    pub fam_served_bytes: [u64; 5],
}

impl RunSummary {
    /// Completed FAM-bound demand reads per microsecond of simulated time.
    pub fn demand_throughput_per_us(&self) -> Option<f64> {
        let us = self.end_time.as_ps() as f64 / 1e6;
        (us > 0.0).then(|| self.stats.demand_latency.count() as f64 / us)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Int(u64),
    Float(f64),
    Text(String),
    Missing,
}

impl Field {
    fn opt(v: Option<f64>) -> Field {
        v.map_or(Field::Missing, Field::Float)
    }

    fn to_json(&self) -> Value {
        match self {
            Field::Int(i) => Value::Number((*i).into()),
            Field::Float(f) => Number::from_f64(*f).map_or(Value::Null, Value::Number),
            Field::Text(s) => Value::String(s.clone()),
            Field::Missing => Value::Null,
        }
    }

    fn to_csv(&self) -> String {
        match self {
            Field::Int(i) => i.to_string(),
            Field::Float(f) => Number::from_f64(*f).map_or("NA".into(), |n| n.to_string()),
            Field::Text(s) if s.contains([',', '"', '\n']) => {
                format!("\"{}\"", s.replace('"', "\"\""))
            }
            Field::Text(s) => s.clone(),
            Field::Missing => "NA".into(),
        }
    }
}

/// Ordered flat record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub fields: Vec<(String, Field)>,
}

impl Report {
    pub fn push(&mut self, key: &str, v: Field) {
        self.fields.push((key.to_string(), v));
    }

    pub fn get(&self, key: &str) -> Option<&Field> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn float(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Field::Float(f) => Some(*f),
            Field::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn from_run(
        run: &RunSummary,
        relative_latency: Option<f64>,
        relative_prefetches: Option<f64>,
    ) -> Report {
        use Field::*;
        let s = &run.stats;
        let mut r = Report::default();
        r.push("schema_version", Int(SCHEMA_VERSION as u64));
        r.push("seed", Int(run.seed));
        r.push("config_fingerprint", Text(run.config_fingerprint.clone()));
        r.push("input_hash", Text(run.input_hash.clone()));
        r.push(
            "workload_fingerprint",
            Text(format!("{:016x}", run.workload_fingerprint)),
        );
        r.push("nodes", Int(run.nodes as u64));
        r.push("sim_time_ns", Float(run.end_time.as_ns_f64()));
        r.push("events", Int(run.events));
        r.push(
            "note",
            Text("no instruction model; latency and throughput stand in for IPC".into()),
        );
        r.push("reads", Int(s.reads));
        r.push("writes", Int(s.writes));
        r.push("local_reads", Int(s.local_reads));
        r.push("local_writes", Int(s.local_writes));
        r.push("demand_reads", Int(s.demand_latency.count()));
        r.push("demand_mean_latency_ns", opt(s.demand_latency.mean_ns()));
        r.push(
            "demand_p50_latency_ns",
            opt(s.demand_latency.quantile_ns(0.5)),
        );
        r.push(
            "demand_p99_latency_ns",
            opt(s.demand_latency.quantile_ns(0.99)),
        );
        r.push(
            "demand_fam_mean_latency_ns",
            opt(s.demand_fam_latency.mean_ns()),
        );
        r.push("local_mean_latency_ns", opt(s.local_latency.mean_ns()));
        r.push(
            "demand_throughput_per_us",
            opt(run.demand_throughput_per_us()),
        );
        r.push("demand_hit_fraction", opt(s.demand_hit_fraction()));
        r.push("demand_merge_fraction", opt(s.demand_merge_fraction()));
        r.push(
            "core_prefetch_hit_fraction",
            opt(s.core_prefetch_hit_fraction()),
        );
        r.push("core_buffer_hits", Int(s.core_buffer_hits));
        r.push("relative_fam_latency", opt(relative_latency));
        r.push("relative_dram_prefetches_issued", opt(relative_prefetches));
        r.push("dram_prefetch_candidates", Int(s.dram_prefetch_candidates));
        r.push("dram_prefetch_issued", Int(s.dram_prefetch_issued));
        r.push("dram_prefetch_filled", Int(s.dram_prefetch_filled));
        r.push("dram_prefetch_used", Int(s.dram_prefetch_used));
        r.push(
            "dram_prefetch_evicted_unused",
            Int(s.dram_prefetch_evicted_unused),
        );
        r.push("dropped_resident", Int(s.dropped_resident));
        r.push("dropped_in_flight", Int(s.dropped_in_flight));
        r.push("dropped_queue_full", Int(s.dropped_queue_full));
        r.push("dropped_throttled", Int(s.dropped_throttled));
        r.push("write_hits", Int(s.write_hits));
        r.push("dirty_evictions", Int(s.dirty_evictions));
        r.push("adapt_samples", Int(s.adapt_samples));
        r.push("adapt_decreases", Int(s.adapt_decreases));
        r.push("fam_mean_queue_depth", Float(run.fam_mean_queue_depth));
        r.push("fam_max_queue", Int(run.fam_max_queue as u64));
        r.push("link_bytes_to_fam", Int(s.link_bytes_to_fam));
        r.push("link_bytes_to_host", Int(s.link_bytes_to_host));
        for c in RequestClass::ALL {
            let k = s.class(c);
            let n = c.name();
            r.push(&format!("{n}_created"), Int(k.created));
            r.push(&format!("{n}_issued"), Int(k.issued));
            r.push(&format!("{n}_completed"), Int(k.completed));
            r.push(&format!("{n}_dropped"), Int(k.dropped));
            r.push(
                &format!("{n}_fam_bytes"),
                Int(run.fam_served_bytes[c.index()]),
            );
        }
        r
    }

    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        for (k, v) in &self.fields {
            m.insert(k.clone(), v.to_json());
        }
        let mut s =
            serde_json::to_string_pretty(&Value::Object(m)).expect("plain values serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<&str> = self.fields.iter().map(|(k, _)| k.as_str()).collect();
        let _ = writeln!(s, "{}", header.join(","));
        let row: Vec<String> = self.fields.iter().map(|(_, v)| v.to_csv()).collect();
        let _ = writeln!(s, "{}", row.join(","));
        s
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
        }
    }

    pub fn write(&self, format: ReportFormat, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.render(format)).map_err(|e| SimError::io(path, e))
    }
}

fn opt(v: Option<f64>) -> Field {
    Field::opt(v)
}

/// Several reports with the same schema as one CSV table.
pub fn csv_table(rows: &[Report]) -> String {
    let mut s = String::new();
    if let Some(first) = rows.first() {
        let header: Vec<&str> = first.fields.iter().map(|(k, _)| k.as_str()).collect();
        let _ = writeln!(s, "{}", header.join(","));
    }
    for r in rows {
        let row: Vec<String> = r.fields.iter().map(|(_, v)| v.to_csv()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_edges() {
        let mut h = LatencyHistogram::default();
        h.record(SimTime::from_ns(1));
        h.record(SimTime::from_ns(1_000_000));
        assert_eq!(h.counts()[0], 1);
        assert_eq!(h.counts()[BUCKETS - 1], 1);
        assert!((LatencyHistogram::bucket_upper_ns(BUCKETS - 1) - 100_000.0).abs() < 1e-6);
    }

    #[test]
    fn histogram_mean_and_quantile() {
        let mut h = LatencyHistogram::default();
        for ns in [100, 200, 300] {
            h.record(SimTime::from_ns(ns));
        }
        assert_eq!(h.mean_ns(), Some(200.0));
        let p50 = h.quantile_ns(0.5).unwrap();
        assert!((200.0..230.0).contains(&p50), "{p50}");
        assert_eq!(LatencyHistogram::default().mean_ns(), None);
    }

    #[test]
    fn hit_fraction_not_applicable_without_lookups() {
        let s = StatSet::default();
        assert_eq!(s.demand_hit_fraction(), None);
        let s = StatSet {
            demand_lookups: 4,
            demand_hits: 1,
            ..Default::default()
        };
        assert_eq!(s.demand_hit_fraction(), Some(0.25));
    }

    #[test]
    fn csv_and_json_agree() {
        let mut r = Report::default();
        r.push("a", Field::Int(3));
        r.push("b", Field::Float(0.1 + 0.2));
        r.push("c", Field::Missing);
        r.push("d", Field::Text("x,y".into()));
        let json: Value = serde_json::from_str(&r.to_json()).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "a,b,c,d");
        let row = lines.next().unwrap();
        assert_eq!(row, format!("3,{},NA,\"x,y\"", json["b"]));
        assert_eq!(json["b"].as_f64().unwrap(), 0.1 + 0.2);
        assert!(json["c"].is_null());
    }
}

//! Paired runs and parameter sweeps.
//!
//! Every reported run is accompanied by its no-prefetch baseline (for
//! relative latency) and, when it uses WFQ or adaptation, by the
//! unoptimized FIFO run (for relative prefetch counts). Identical configs
//! are simulated once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::thread;

use crate::config::ExperimentConfig;
use crate::error::SimError;
use crate::famnode::SchedulerKind;
use crate::metrics::{
    csv_table, relative_fam_latency, relative_prefetches_issued, Field, Report, RunSummary,
};
use crate::sim;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    BlockSize,
    AllocationRatio,
    Nodes,
    WfqWeight,
    CacheSize,
    Adaptation,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::BlockSize,
        SweepAxis::AllocationRatio,
        SweepAxis::Nodes,
        SweepAxis::WfqWeight,
        SweepAxis::CacheSize,
        SweepAxis::Adaptation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BlockSize => "block_size",
            SweepAxis::AllocationRatio => "allocation_ratio",
            SweepAxis::Nodes => "nodes",
            SweepAxis::WfqWeight => "wfq_weight",
            SweepAxis::CacheSize => "cache_size",
            SweepAxis::Adaptation => "adaptation",
        }
    }

    /// `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, SimError> {
        let mut c = cfg.clone();
        let key = self.name();
        let bad = |e: String| SimError::config(key, format!("{value:?}: {e}"));
        match self {
            SweepAxis::BlockSize => c.block_size = parse_bytes(value).map_err(bad)?,
            SweepAxis::AllocationRatio => {
                c.allocation_ratio = value.parse().map_err(|e| bad(format!("{e}")))?
            }
            SweepAxis::Nodes => c.nodes = value.parse().map_err(|e| bad(format!("{e}")))?,
            SweepAxis::WfqWeight => {
                c.wfq_weight = value.parse().map_err(|e| bad(format!("{e}")))?;
                c.scheduler = SchedulerKind::Wfq;
            }
            SweepAxis::CacheSize => c.cache_size = parse_bytes(value).map_err(bad)?,
            SweepAxis::Adaptation => c.adaptation = parse_switch(value).map_err(bad)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SweepAxis::ALL.iter().map(|a| a.name()).collect();
                format!(
                    "unknown sweep axis {s:?} (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Byte counts with an optional K/M/G (binary) suffix: `4M`, `256`, `1KiB`.
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t
        .strip_suffix("iB")
        .or_else(|| t.strip_suffix('B'))
        .unwrap_or(t);
    let (num, shift) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 30),
        _ => (t, 0),
    };
    let n: u64 = num.trim().parse().map_err(|e| format!("{e}"))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| "too large".to_string())
}

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err("expected on or off".into()),
    }
}

/// The optimization-free reference used for relative prefetch counts.
pub fn unoptimized(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        scheduler: SchedulerKind::Fifo,
        adaptation: false,
        ..cfg.clone()
    }
}

/// Runs distinct configs on a bounded pool of threads.
pub fn run_all(cfgs: &[ExperimentConfig]) -> Result<Vec<RunSummary>, SimError> {
    let mut unique: BTreeMap<String, usize> = BTreeMap::new();
    let mut todo: Vec<&ExperimentConfig> = Vec::new();
    let slots: Vec<usize> = cfgs
        .iter()
        .map(|c| {
            *unique.entry(c.canonical()).or_insert_with(|| {
                todo.push(c);
                todo.len() - 1
            })
        })
        .collect();
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(todo.len())
        .max(1);
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<Option<Result<RunSummary, SimError>>>> =
        Mutex::new((0..todo.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("no poisoned lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(cfg) = todo.get(i) else { break };
                let r = sim::run(cfg);
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let done: Vec<RunSummary> = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_, _>>()?;
    Ok(slots.into_iter().map(|i| done[i].clone()).collect())
}

/// A run with the relative metrics filled in.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub config: ExperimentConfig,
    pub run: RunSummary,
    pub relative_latency: Option<f64>,
    pub relative_prefetches: Option<f64>,
    pub report: Report,
}

fn outcome(
    cfg: &ExperimentConfig,
    run: RunSummary,
    baseline: &RunSummary,
    reference: &RunSummary,
) -> Result<Outcome, SimError> {
    let relative_latency = relative_fam_latency(&run, baseline)?;
    let relative_prefetches = relative_prefetches_issued(&run, reference);
    let report = Report::from_run(&run, relative_latency, relative_prefetches);
    Ok(Outcome {
        config: cfg.clone(),
        run,
        relative_latency,
        relative_prefetches,
        report,
    })
}

/// Runs `cfgs` together with their baselines and references.
pub fn run_paired(cfgs: &[ExperimentConfig]) -> Result<Vec<Outcome>, SimError> {
    let mut all = Vec::with_capacity(cfgs.len() * 3);
    for c in cfgs {
        all.push(c.clone());
        all.push(c.baseline());
        all.push(unoptimized(c));
    }
    let runs = run_all(&all)?;
    cfgs.iter()
        .zip(runs.chunks(3))
        .map(|(c, r)| outcome(c, r[0].clone(), &r[1], &r[2]))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, SimError> {
    Ok(run_paired(std::slice::from_ref(cfg))?.remove(0))
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub outcomes: Vec<Outcome>,
}

impl Sweep {
    /// One row per value: the axis and value, then the full report.
    pub fn summary_csv(&self) -> String {
        let rows: Vec<Report> = self
            .values
            .iter()
            .zip(&self.outcomes)
            .map(|(v, o)| {
                let mut r = Report::default();
                r.push("axis", Field::Text(self.axis.name().into()));
                r.push("value", Field::Text(v.clone()));
                r.fields.extend(o.report.fields.iter().cloned());
                r
            })
            .collect();
        csv_table(&rows)
    }
}

pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Sweep, SimError> {
    if values.is_empty() {
        return Err(SimError::EmptySweep);
    }
    let cfgs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sweep {
        axis,
        values: values.to_vec(),
        outcomes: run_paired(&cfgs)?,
    })
}

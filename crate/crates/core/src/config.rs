//! Experiment configuration.
//!
//! A config is a flat TOML table. Every key is optional and falls back to
//! the default system; unknown keys are rejected. [`ExperimentConfig::canonical`]
//! gives the one text form used for fingerprints and for the checked-in
//! `configs/default.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::dcache::DcacheGeometry;
use crate::engine::SimTime;
use crate::error::SimError;
use crate::fabric::LinkConfig;
use crate::famnode::{BackendConfig, DwrrConfig, SchedulerKind};
use crate::request::LINE_BYTES;
use crate::rootcomplex::{AdaptConfig, RcConfig};
use crate::spp::{SppConfig, BLOCK_SIZES};
use crate::workload::{CoreModel, GeneratorSpec};

pub const MAX_NODES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub nodes: usize,

    /// Generator used by every node without its own entry.
    pub workload: String,
    /// Per-node generator overrides, by node index.
    pub node_workloads: Vec<String>,
    /// Trace file; when set it replaces the generators.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub footprint_bytes: u64,
    pub write_fraction: f64,
    pub allocation_ratio: f64,
    pub duration_accesses: u64,
    pub warmup_accesses: u64,
    pub max_outstanding: usize,
    pub issue_gap_ps: u64,
    pub core_prefetch: bool,
    pub core_prefetch_degree: usize,

    pub cache_size: u64,
    pub block_size: u64,
    pub cache_ways: u32,

    pub dram_prefetch: bool,
    pub prefetch_degree: usize,
    pub confidence_floor: f64,
    pub signature_entries: usize,
    pub pattern_entries: usize,
    pub bootstrap: bool,
    pub queue_capacity: usize,
    pub drop_threshold: f64,

    pub link_latency_ps: u64,
    pub link_bandwidth: u64,
    pub flit_bytes: u64,
    pub min_packet_bytes: u64,

    pub scheduler: SchedulerKind,
    pub wfq_weight: u32,
    pub quantum: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_demand_deficit: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_prefetch_deficit: Option<u64>,
    pub fam_channels: usize,
    pub fam_access_latency_ps: u64,
    pub fam_channel_bandwidth: u64,
    pub local_channels: usize,
    pub local_access_latency_ps: u64,
    pub local_channel_bandwidth: u64,

    pub adaptation: bool,
    pub sampling_period_ps: u64,
    pub ema_alpha: f64,
    pub min_window: usize,
    pub adapt_k: f64,
    pub noise_threshold: f64,
    pub increase_factor: f64,
    pub rate_min: f64,
    /// Defaults to four times the queue capacity.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_max: Option<f64>,
    pub initial_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let link = LinkConfig::default();
        let fam = BackendConfig::fam_default();
        let local = BackendConfig::local_default();
        let adapt = AdaptConfig::default();
        let geom = DcacheGeometry::default();
        let core = CoreModel::default();
        ExperimentConfig {
            seed: 1,
            nodes: 1,
            workload: "stride:64".into(),
            node_workloads: Vec::new(),
            trace: None,
            footprint_bytes: 256 << 20,
            write_fraction: 0.0,
            allocation_ratio: 8.0,
            duration_accesses: 100_000,
            warmup_accesses: 0,
            max_outstanding: core.max_outstanding,
            issue_gap_ps: core.issue_gap.as_ps(),
            core_prefetch: false,
            core_prefetch_degree: 2,
            cache_size: geom.capacity,
            block_size: geom.block_size,
            cache_ways: geom.ways,
            dram_prefetch: true,
            prefetch_degree: 4,
            confidence_floor: 0.25,
            signature_entries: 256,
            pattern_entries: 512,
            bootstrap: true,
            queue_capacity: 256,
            drop_threshold: 0.95,
            link_latency_ps: link.propagation.as_ps(),
            link_bandwidth: link.bandwidth,
            flit_bytes: link.flit_bytes,
            min_packet_bytes: link.min_packet_bytes,
            scheduler: SchedulerKind::Fifo,
            wfq_weight: 2,
            quantum: 1,
            max_demand_deficit: None,
            max_prefetch_deficit: None,
            fam_channels: fam.channels,
            fam_access_latency_ps: fam.access_latency.as_ps(),
            fam_channel_bandwidth: fam.channel_bandwidth,
            local_channels: local.channels,
            local_access_latency_ps: local.access_latency.as_ps(),
            local_channel_bandwidth: local.channel_bandwidth,
            adaptation: false,
            sampling_period_ps: adapt.sampling_period.as_ps(),
            ema_alpha: adapt.ema_alpha,
            min_window: adapt.min_window,
            adapt_k: adapt.k,
            noise_threshold: adapt.noise_threshold,
            increase_factor: adapt.increase_factor,
            rate_min: adapt.rate_min,
            rate_max: None,
            initial_rate: adapt.initial_rate,
        }
    }
}

/// Pulls the key out of a serde "unknown field" message.
fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

fn check(ok: bool, key: &str, reason: impl Into<String>) -> Result<(), SimError> {
    if ok {
        Ok(())
    } else {
        Err(SimError::config(key, reason))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match unknown_key(&msg) {
                Some(key) => SimError::config(key, "unknown key"),
                None => {
                    // the span covers the value; the key starts its line
                    let key = e
                        .span()
                        .map(|s| {
                            let start = text[..s.start].rfind('\n').map_or(0, |i| i + 1);
                            let line = &text[start..];
                            line.split('=').next().unwrap_or(line).trim().to_string()
                        })
                        .filter(|k| !k.is_empty())
                        .unwrap_or_else(|| "config".into());
                    SimError::config(key, msg)
                }
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-1 of the canonical text.
    pub fn fingerprint(&self) -> String {
        hex_digest(Sha1::digest(self.canonical().as_bytes()).as_slice())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        check(
            (1..=MAX_NODES).contains(&self.nodes),
            "nodes",
            format!("must be in 1..={MAX_NODES}"),
        )?;
        if self.trace.is_none() {
            self.workload
                .parse::<GeneratorSpec>()
                .map_err(|e| SimError::config("workload", e))?;
            for (i, w) in self.node_workloads.iter().enumerate() {
                w.parse::<GeneratorSpec>()
                    .map_err(|e| SimError::config("node_workloads", format!("entry {i}: {e}")))?;
            }
        }
        check(
            self.footprint_bytes >= 4096,
            "footprint_bytes",
            "must be at least one page",
        )?;
        check(
            (0.0..=1.0).contains(&self.write_fraction),
            "write_fraction",
            "must be in [0, 1]",
        )?;
        check(
            self.allocation_ratio >= 0.0,
            "allocation_ratio",
            "must be non-negative (inf for all-FAM)",
        )?;
        check(
            self.duration_accesses > 0,
            "duration_accesses",
            "must be positive",
        )?;
        check(
            self.max_outstanding > 0,
            "max_outstanding",
            "must be positive",
        )?;
        check(
            BLOCK_SIZES.contains(&self.block_size),
            "block_size",
            format!("must be one of {BLOCK_SIZES:?}"),
        )?;
        self.geometry().validate().map_err(|e| match e {
            SimError::Config { reason, .. } => SimError::config("cache_size", reason),
            e => e,
        })?;
        check(
            self.prefetch_degree > 0,
            "prefetch_degree",
            "must be positive",
        )?;
        check(
            (0.0..=1.0).contains(&self.confidence_floor),
            "confidence_floor",
            "must be in [0, 1]",
        )?;
        check(
            self.signature_entries > 0,
            "signature_entries",
            "must be positive",
        )?;
        check(
            self.pattern_entries > 0,
            "pattern_entries",
            "must be positive",
        )?;
        check(
            self.queue_capacity > 0,
            "queue_capacity",
            "must be positive",
        )?;
        check(
            self.drop_threshold > 0.0 && self.drop_threshold <= 1.0,
            "drop_threshold",
            "must be in (0, 1]",
        )?;
        check(
            self.link_bandwidth > 0,
            "link_bandwidth",
            "must be positive",
        )?;
        check(self.flit_bytes > 0, "flit_bytes", "must be positive")?;
        check(
            self.min_packet_bytes > 0,
            "min_packet_bytes",
            "must be positive",
        )?;
        check(
            (1..=3).contains(&self.wfq_weight),
            "wfq_weight",
            "must be 1, 2 or 3",
        )?;
        check(self.quantum > 0, "quantum", "must be positive")?;
        let dwrr = self.dwrr();
        check(
            dwrr.max_demand_deficit >= dwrr.ratio,
            "max_demand_deficit",
            format!("must be at least the block/line ratio {}", dwrr.ratio),
        )?;
        check(
            dwrr.max_prefetch_deficit >= dwrr.ratio,
            "max_prefetch_deficit",
            format!("must be at least the block/line ratio {}", dwrr.ratio),
        )?;
        check(self.fam_channels > 0, "fam_channels", "must be positive")?;
        check(
            self.fam_channel_bandwidth > 0,
            "fam_channel_bandwidth",
            "must be positive",
        )?;
        check(
            self.local_channels > 0,
            "local_channels",
            "must be positive",
        )?;
        check(
            self.local_channel_bandwidth > 0,
            "local_channel_bandwidth",
            "must be positive",
        )?;
        check(
            self.sampling_period_ps > 0,
            "sampling_period_ps",
            "must be positive",
        )?;
        check(
            self.ema_alpha > 0.0 && self.ema_alpha <= 1.0,
            "ema_alpha",
            "must be in (0, 1]",
        )?;
        check(self.min_window > 0, "min_window", "must be positive")?;
        check(self.adapt_k >= 0.0, "adapt_k", "must be non-negative")?;
        check(
            self.noise_threshold >= 1.0,
            "noise_threshold",
            "must be at least 1",
        )?;
        check(
            self.increase_factor >= 1.0,
            "increase_factor",
            "must be at least 1",
        )?;
        check(self.rate_min >= 0.0, "rate_min", "must be non-negative")?;
        check(
            self.rate_max() >= self.rate_min,
            "rate_max",
            "must not be below rate_min",
        )?;
        Ok(())
    }

    pub fn generator(&self, node: usize) -> Result<GeneratorSpec, SimError> {
        let text = self.node_workloads.get(node).unwrap_or(&self.workload);
        text.parse()
            .map_err(|e: String| SimError::config("workload", e))
    }

    pub fn geometry(&self) -> DcacheGeometry {
        DcacheGeometry {
            capacity: self.cache_size,
            block_size: self.block_size,
            ways: self.cache_ways,
        }
    }

    pub fn link(&self) -> LinkConfig {
        LinkConfig {
            propagation: SimTime(self.link_latency_ps),
            bandwidth: self.link_bandwidth,
            flit_bytes: self.flit_bytes,
            min_packet_bytes: self.min_packet_bytes,
        }
    }

    pub fn dwrr(&self) -> DwrrConfig {
        let mut d = DwrrConfig::new(self.wfq_weight, (self.block_size / LINE_BYTES).max(1));
        d.quantum = self.quantum;
        if let Some(c) = self.max_demand_deficit {
            d.max_demand_deficit = c;
        }
        if let Some(c) = self.max_prefetch_deficit {
            d.max_prefetch_deficit = c;
        }
        d
    }

    pub fn fam_backend(&self) -> BackendConfig {
        BackendConfig {
            channels: self.fam_channels,
            access_latency: SimTime(self.fam_access_latency_ps),
            channel_bandwidth: self.fam_channel_bandwidth,
        }
    }

    pub fn local_backend(&self) -> BackendConfig {
        BackendConfig {
            channels: self.local_channels,
            access_latency: SimTime(self.local_access_latency_ps),
            channel_bandwidth: self.local_channel_bandwidth,
        }
    }

    pub fn rate_max(&self) -> f64 {
        self.rate_max.unwrap_or(4.0 * self.queue_capacity as f64)
    }

    pub fn core_model(&self) -> CoreModel {
        CoreModel {
            max_outstanding: self.max_outstanding,
            issue_gap: SimTime(self.issue_gap_ps),
        }
    }

    pub fn root_complex(&self) -> RcConfig {
        RcConfig {
            prefetch: self.dram_prefetch,
            degree: self.prefetch_degree,
            confidence_floor: self.confidence_floor,
            queue_capacity: self.queue_capacity,
            drop_threshold: self.drop_threshold,
            geometry: self.geometry(),
            spp: SppConfig {
                block_size: self.block_size,
                signature_entries: self.signature_entries,
                pattern_entries: self.pattern_entries,
                bootstrap: self.bootstrap,
                ..SppConfig::default()
            },
            local: self.local_backend(),
            adapt: AdaptConfig {
                enabled: self.adaptation,
                sampling_period: SimTime(self.sampling_period_ps),
                ema_alpha: self.ema_alpha,
                min_window: self.min_window,
                k: self.adapt_k,
                noise_threshold: self.noise_threshold,
                increase_factor: self.increase_factor,
                rate_min: self.rate_min,
                rate_max: self.rate_max(),
                initial_rate: self.initial_rate,
            },
        }
    }

    /// The paired no-prefetch run used for relative metrics.
    pub fn baseline(&self) -> ExperimentConfig {
        ExperimentConfig {
            dram_prefetch: false,
            core_prefetch: false,
            adaptation: false,
            ..self.clone()
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git blob hash of `content`.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex_digest(h.finalize().as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn canonical_round_trips() {
        let c = ExperimentConfig {
            allocation_ratio: f64::INFINITY,
            trace: Some("t.txt".into()),
            rate_max: Some(99.0),
            ..Default::default()
        };
        let back = ExperimentConfig::from_toml(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical(), c.canonical());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml("wfq_wieght = 2\n").unwrap_err();
        match err {
            SimError::Config { key, .. } => assert_eq!(key, "wfq_wieght"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_value_is_named() {
        for (doc, key) in [
            ("nodes = 0", "nodes"),
            ("block_size = 96", "block_size"),
            ("drop_threshold = 1.5", "drop_threshold"),
            ("wfq_weight = 7", "wfq_weight"),
            ("workload = \"zigzag\"", "workload"),
            ("cache_size = 1000", "cache_size"),
        ] {
            match ExperimentConfig::from_toml(doc).unwrap_err() {
                SimError::Config { key: k, .. } => assert_eq!(k, key, "{doc}"),
                e => panic!("{doc}: {e}"),
            }
        }
    }

    #[test]
    fn type_error_names_key() {
        match ExperimentConfig::from_toml("nodes = \"four\"").unwrap_err() {
            SimError::Config { key, .. } => assert_eq!(key, "nodes"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn git_blob_hash_matches_git() {
        // `printf hello | git hash-object --stdin`
        assert_eq!(
            git_blob_hash(b"hello"),
            "b6fc4c620b67d95f953a5c1c1230aaab5db5a1b0"
        );
    }

    #[test]
    fn rate_max_follows_capacity() {
        let c = ExperimentConfig {
            queue_capacity: 64,
            ..Default::default()
        };
        assert_eq!(c.rate_max(), 256.0);
        assert_eq!(c.root_complex().adapt.rate_max, 256.0);
    }
}

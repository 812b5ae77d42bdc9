//! Discrete-event simulation of compute nodes sharing a fabric-attached
//! memory pool.
//!
//! Each node caches FAM blocks in part of its local DRAM, filled by a
//! block-granular signature path prefetcher. The FAM node can schedule
//! demand reads and prefetches with weighted deficit round robin, and nodes
//! can throttle prefetch issue from observed demand latency.
//!
//! ```
//! use famsim::config::ExperimentConfig;
//!
//! let cfg = ExperimentConfig {
//!     nodes: 2,
//!     duration_accesses: 1_000,
//!     ..Default::default()
//! };
//! let run = famsim::sim::run(&cfg)?;
//! assert_eq!(run.per_node.len(), 2);
//! # Ok::<(), famsim::error::SimError>(())
//! ```
//!
//! Start from [`config::ExperimentConfig`] and [`sim::run`], or
//! [`experiment`] for paired runs and sweeps.

pub mod config;
pub mod dcache;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod fabric;
pub mod famnode;
pub mod metrics;
pub mod request;
pub mod rootcomplex;
pub mod sim;
pub mod spp;
pub mod workload;

pub use config::ExperimentConfig;
pub use engine::SimTime;
pub use error::{Result, SimError};
pub use metrics::RunSummary;

// Book chapters run as doc-tests so the guide cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/time.md")]
    mod time {}
    #[doc = include_str!("../../../book/src/workloads.md")]
    mod workloads {}
    #[doc = include_str!("../../../book/src/spp.md")]
    mod spp {}
    #[doc = include_str!("../../../book/src/dcache.md")]
    mod dcache {}
    #[doc = include_str!("../../../book/src/fam.md")]
    mod fam {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

use std::path::PathBuf;

use thiserror::Error;

use crate::engine::SimTime;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but clock is already at {now}")]
    PastEvent { at: SimTime, now: SimTime },

    #[error("address {0:#x} is not aligned to the {1}-byte block size")]
    Unaligned(u64, u64),

    #[error("block {0:#x} is already resident")]
    AlreadyResident(u64),

    #[error("zero delta does not train the prefetcher")]
    ZeroDelta,

    #[error("invalid configuration: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    TraceParse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("workload fingerprints differ ({0:016x} vs {1:016x})")]
    FingerprintMismatch(u64, u64),

    #[error("sweep needs at least one value")]
    EmptySweep,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

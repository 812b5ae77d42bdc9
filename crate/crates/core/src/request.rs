//! Memory transactions exchanged between nodes and the FAM endpoint.

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;

/// Bytes in one CPU cache line; the unit of demand traffic.
pub const LINE_BYTES: u64 = 64;
/// Bytes in one OS page.
pub const PAGE_BYTES: u64 = 4096;
/// Addresses live in a 48-bit physical space.
pub const ADDRESS_BITS: u32 = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestClass {
    Demand,
    CorePrefetch,
    DramPrefetch,
    Writeback,
    EvictionWriteback,
}

impl RequestClass {
    pub const ALL: [RequestClass; 5] = [
        RequestClass::Demand,
        RequestClass::CorePrefetch,
        RequestClass::DramPrefetch,
        RequestClass::Writeback,
        RequestClass::EvictionWriteback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RequestClass::Demand => "demand",
            RequestClass::CorePrefetch => "core_prefetch",
            RequestClass::DramPrefetch => "dram_prefetch",
            RequestClass::Writeback => "writeback",
            RequestClass::EvictionWriteback => "eviction_writeback",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Writes carry their payload toward FAM and get no response.
    pub fn is_write(self) -> bool {
        matches!(
            self,
            RequestClass::Writeback | RequestClass::EvictionWriteback
        )
    }

    /// Classes the FAM scheduler places in its prefetch queue.
    pub fn is_prefetch(self) -> bool {
        matches!(
            self,
            RequestClass::CorePrefetch | RequestClass::DramPrefetch
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Request {
    pub id: u64,
    pub node: u16,
    pub class: RequestClass,
    pub address: u64,
    pub size: u64,
    pub t_created: SimTime,
    pub t_issued: SimTime,
    pub t_completed: Option<SimTime>,
}

impl Request {
    pub fn new(
        id: u64,
        node: u16,
        class: RequestClass,
        address: u64,
        size: u64,
        now: SimTime,
    ) -> Self {
        Request {
            id,
            node,
            class,
            address,
            size,
            t_created: now,
            t_issued: now,
            t_completed: None,
        }
    }

    /// Size in demand-line units, rounded up. A 256 B block is 4 units.
    pub fn units(&self) -> u64 {
        self.size.div_ceil(LINE_BYTES).max(1)
    }
}

pub fn line_of(address: u64) -> u64 {
    address & !(LINE_BYTES - 1)
}

pub fn page_of(address: u64) -> u64 {
    address / PAGE_BYTES
}

//! DRAM-cache metadata.
//!
//! Only tags, recency and dirty bits are modeled; block contents are not.
//! FAM block numbers are XOR-folded down to a set index, and the tag keeps
//! every block-number bit above the set bits, so a (set, tag) pair names
//! exactly one block.

use crate::error::SimError;
use crate::request::ADDRESS_BITS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcacheGeometry {
    pub capacity: u64,
    pub block_size: u64,
    pub ways: u32,
}

impl Default for DcacheGeometry {
    fn default() -> Self {
        DcacheGeometry {
            capacity: 16 << 20,
            block_size: 256,
            ways: 16,
        }
    }
}

impl DcacheGeometry {
    pub fn validate(&self) -> Result<(), SimError> {
        for (key, v) in [
            ("cache_size", self.capacity),
            ("block_size", self.block_size),
            ("ways", self.ways as u64),
        ] {
            if v == 0 || !v.is_power_of_two() {
                return Err(SimError::config(key, format!("{v} is not a power of two")));
            }
        }
        if self.capacity < self.block_size * self.ways as u64 {
            return Err(SimError::config(
                "cache_size",
                "smaller than one set (block_size x ways)",
            ));
        }
        Ok(())
    }

    pub fn sets(&self) -> u64 {
        self.capacity / (self.block_size * self.ways as u64)
    }

    pub fn entries(&self) -> u64 {
        self.sets() * self.ways as u64
    }

    pub fn set_bits(&self) -> u32 {
        self.sets().trailing_zeros()
    }

    pub fn block_bits(&self) -> u32 {
        self.block_size.trailing_zeros()
    }

    pub fn tag_bits(&self) -> u32 {
        ADDRESS_BITS - self.block_bits() - self.set_bits()
    }

    pub fn lru_bits(&self) -> u32 {
        self.ways.trailing_zeros()
    }

    /// Bits of state per metadata entry: valid, dirty, tag and recency rank.
    pub fn entry_payload_bits(&self) -> u32 {
        2 + self.tag_bits() + self.lru_bits()
    }

    pub fn entry_payload_bytes(&self) -> u32 {
        self.entry_payload_bits().div_ceil(8)
    }

    pub fn metadata_bytes(&self) -> u64 {
        self.entries() * self.entry_payload_bytes() as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetaSlot {
    pub valid: bool,
    pub dirty: bool,
    pub fam_tag: u64,
    /// 0 is most recently used.
    pub lru_rank: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Evicted {
    pub fam_block_address: u64,
    pub was_dirty: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit { dram_slot_address: u64 },
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub dram_slot_address: u64,
    pub evicted: Option<Evicted>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WriteOutcome {
    Updated,
    Miss,
}

#[derive(Clone, Debug)]
pub struct DcacheMeta {
    geom: DcacheGeometry,
    set_mask: u64,
    slots: Vec<MetaSlot>,
    valid_in_set: Vec<u32>,
    resident: u64,
}

impl DcacheMeta {
    pub fn new(geom: DcacheGeometry) -> Result<Self, SimError> {
        geom.validate()?;
        let sets = geom.sets();
        Ok(DcacheMeta {
            geom,
            set_mask: sets - 1,
            slots: vec![MetaSlot::default(); geom.entries() as usize],
            valid_in_set: vec![0; sets as usize],
            resident: 0,
        })
    }

    pub fn geometry(&self) -> &DcacheGeometry {
        &self.geom
    }

    pub fn resident(&self) -> u64 {
        self.resident
    }

    fn check_aligned(&self, addr: u64) -> Result<(), SimError> {
        if !addr.is_multiple_of(self.geom.block_size) {
            Err(SimError::Unaligned(addr, self.geom.block_size))
        } else {
            Ok(())
        }
    }

    /// XOR-fold of the block number into `log2(sets)` bits.
    pub fn set_index(&self, fam_block_address: u64) -> u64 {
        let bits = self.geom.set_bits();
        let mut block = fam_block_address >> self.geom.block_bits();
        if bits == 0 {
            return 0;
        }
        let mut idx = 0;
        while block != 0 {
            idx ^= block & self.set_mask;
            block >>= bits;
        }
        idx
    }

    fn tag(&self, fam_block_address: u64) -> u64 {
        (fam_block_address >> self.geom.block_bits()) >> self.geom.set_bits()
    }

    fn set_range(&self, set: u64) -> std::ops::Range<usize> {
        let w = self.geom.ways as usize;
        let base = set as usize * w;
        base..base + w
    }

    pub fn set_slots(&self, set: u64) -> &[MetaSlot] {
        &self.slots[self.set_range(set)]
    }

    fn slot_address(&self, set: u64, way: usize) -> u64 {
        (set * self.geom.ways as u64 + way as u64) * self.geom.block_size
    }

    fn find(&self, set: u64, tag: u64) -> Option<usize> {
        self.set_slots(set)
            .iter()
            .position(|s| s.valid && s.fam_tag == tag)
    }

    /// Moves `way` to rank 0, shifting every more-recent valid slot down.
    fn touch(&mut self, set: u64, way: usize) {
        let range = self.set_range(set);
        let slots = &mut self.slots[range];
        let old = slots[way].lru_rank;
        for s in slots.iter_mut().filter(|s| s.valid && s.lru_rank < old) {
            s.lru_rank += 1;
        }
        slots[way].lru_rank = 0;
    }

    /// Residency check without updating recency.
    pub fn contains(&self, fam_block_address: u64) -> bool {
        let set = self.set_index(fam_block_address);
        self.find(set, self.tag(fam_block_address)).is_some()
    }

    pub fn lookup(&mut self, fam_block_address: u64) -> Result<Lookup, SimError> {
        self.check_aligned(fam_block_address)?;
        let set = self.set_index(fam_block_address);
        match self.find(set, self.tag(fam_block_address)) {
            Some(way) => {
                self.touch(set, way);
                Ok(Lookup::Hit {
                    dram_slot_address: self.slot_address(set, way),
                })
            }
            None => Ok(Lookup::Miss),
        }
    }

    pub fn allocate(
        &mut self,
        fam_block_address: u64,
        dirty: bool,
    ) -> Result<Allocation, SimError> {
        self.check_aligned(fam_block_address)?;
        let set = self.set_index(fam_block_address);
        let tag = self.tag(fam_block_address);
        if self.find(set, tag).is_some() {
            return Err(SimError::AlreadyResident(fam_block_address));
        }
        let ways = self.geom.ways;
        let set_bits = self.geom.set_bits();
        let block_bits = self.geom.block_bits();
        let range = self.set_range(set);
        let valid = self.valid_in_set[set as usize];
        let slots = &mut self.slots[range];

        let (way, evicted) = match slots.iter().position(|s| !s.valid) {
            Some(way) => {
                // new slot enters as least recent, then gets touched
                slots[way].lru_rank = valid;
                self.valid_in_set[set as usize] += 1;
                self.resident += 1;
                (way, None)
            }
            None => {
                let way = slots
                    .iter()
                    .position(|s| s.lru_rank == ways - 1)
                    .expect("full set has an LRU slot");
                let victim = slots[way];
                let block = ((victim.fam_tag << set_bits) | self.unfold_low(set, victim.fam_tag))
                    << block_bits;
                (
                    way,
                    Some(Evicted {
                        fam_block_address: block,
                        was_dirty: victim.dirty,
                    }),
                )
            }
        };
        let base = self.set_range(set).start;
        let slot = &mut self.slots[base + way];
        slot.valid = true;
        slot.dirty = dirty;
        slot.fam_tag = tag;
        self.touch(set, way);
        Ok(Allocation {
            dram_slot_address: self.slot_address(set, way),
            evicted,
        })
    }

    /// Recovers the low block-number bits from a set index and a tag.
    fn unfold_low(&self, set: u64, tag: u64) -> u64 {
        let bits = self.geom.set_bits();
        if bits == 0 {
            return 0;
        }
        let mut rest = tag;
        let mut fold = 0;
        while rest != 0 {
            fold ^= rest & self.set_mask;
            rest >>= bits;
        }
        set ^ fold
    }

    /// Marks a resident block dirty. No write-allocate.
    pub fn write_hit(&mut self, fam_block_address: u64) -> Result<WriteOutcome, SimError> {
        self.check_aligned(fam_block_address)?;
        let set = self.set_index(fam_block_address);
        match self.find(set, self.tag(fam_block_address)) {
            Some(way) => {
                let base = self.set_range(set).start;
                self.slots[base + way].dirty = true;
                self.touch(set, way);
                Ok(WriteOutcome::Updated)
            }
            None => Ok(WriteOutcome::Miss),
        }
    }

    /// Checks the per-set invariants. Test and debug use.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut total = 0;
        for set in 0..self.geom.sets() {
            let slots = self.set_slots(set);
            let valid: Vec<&MetaSlot> = slots.iter().filter(|s| s.valid).collect();
            let mut ranks: Vec<u32> = valid.iter().map(|s| s.lru_rank).collect();
            ranks.sort_unstable();
            if ranks != (0..valid.len() as u32).collect::<Vec<_>>() {
                return Err(format!("set {set}: ranks {ranks:?}"));
            }
            let mut tags: Vec<u64> = valid.iter().map(|s| s.fam_tag).collect();
            tags.sort_unstable();
            tags.dedup();
            if tags.len() != valid.len() {
                return Err(format!("set {set}: duplicate tags"));
            }
            if valid.len() as u32 != self.valid_in_set[set as usize] {
                return Err(format!("set {set}: valid count drift"));
            }
            total += valid.len() as u64;
        }
        if total != self.resident || total > self.geom.entries() {
            return Err(format!("resident {} vs counted {total}", self.resident));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DcacheMeta {
        // 4 sets x 16 ways x 256 B
        DcacheMeta::new(DcacheGeometry {
            capacity: 4 * 16 * 256,
            block_size: 256,
            ways: 16,
        })
        .unwrap()
    }

    fn blocks_in_set(c: &DcacheMeta, set: u64, n: usize) -> Vec<u64> {
        (0u64..)
            .map(|b| b * 256)
            .filter(|&a| c.set_index(a) == set)
            .take(n)
            .collect()
    }

    #[test]
    fn empty_misses() {
        let mut c = small();
        assert_eq!(c.lookup(0x1234_5600).unwrap(), Lookup::Miss);
    }

    #[test]
    fn allocate_then_hit_is_mru() {
        let mut c = small();
        let a = c.allocate(0x100, false).unwrap();
        assert_eq!(a.evicted, None);
        let set = c.set_index(0x100);
        assert_eq!(a.dram_slot_address, set * 16 * 256);
        assert_eq!(
            c.lookup(0x100).unwrap(),
            Lookup::Hit {
                dram_slot_address: a.dram_slot_address
            }
        );
        assert_eq!(c.set_slots(set)[0].lru_rank, 0);
    }

    #[test]
    fn touched_block_survives_next_eviction() {
        let mut c = small();
        let blocks = blocks_in_set(&c, 1, 17);
        for &b in &blocks[..16] {
            c.allocate(b, false).unwrap();
        }
        // insertion order 0..15 leaves block 0 as LRU; touching it makes
        // block 1 the LRU
        assert!(matches!(c.lookup(blocks[0]).unwrap(), Lookup::Hit { .. }));
        let a = c.allocate(blocks[16], false).unwrap();
        assert_eq!(
            a.evicted,
            Some(Evicted {
                fam_block_address: blocks[1],
                was_dirty: false
            })
        );
        assert!(c.contains(blocks[0]));
        c.check_invariants().unwrap();
    }

    #[test]
    fn dirty_eviction_is_reported() {
        let mut c = small();
        let blocks = blocks_in_set(&c, 2, 17);
        c.allocate(blocks[0], false).unwrap();
        assert_eq!(c.write_hit(blocks[0]).unwrap(), WriteOutcome::Updated);
        for &b in &blocks[1..16] {
            c.allocate(b, false).unwrap();
        }
        let a = c.allocate(blocks[16], false).unwrap();
        assert_eq!(a.evicted.unwrap().fam_block_address, blocks[0]);
        assert!(a.evicted.unwrap().was_dirty);
    }

    #[test]
    fn write_to_absent_block_misses() {
        let mut c = small();
        assert_eq!(c.write_hit(0x4000).unwrap(), WriteOutcome::Miss);
        assert_eq!(c.resident(), 0);
    }

    #[test]
    fn rejects_unaligned_and_double_allocate() {
        let mut c = small();
        assert!(matches!(c.lookup(0x101), Err(SimError::Unaligned(..))));
        c.allocate(0x200, false).unwrap();
        assert!(matches!(
            c.allocate(0x200, true),
            Err(SimError::AlreadyResident(0x200))
        ));
    }

    #[test]
    fn fold_of_zero_is_zero() {
        let c = DcacheMeta::new(DcacheGeometry::default()).unwrap();
        assert_eq!(c.set_index(0), 0);
    }

    #[test]
    fn evicted_address_round_trips_through_tag() {
        let mut c = DcacheMeta::new(DcacheGeometry::default()).unwrap();
        let addr = 0xABCD_EF12_3400u64;
        let set = c.set_index(addr);
        c.allocate(addr, true).unwrap();
        let mut victim = None;
        let mut b = 0u64;
        while victim.is_none() {
            let a = b * 256;
            b += 1;
            if c.set_index(a) == set && a != addr {
                victim = c.allocate(a, false).unwrap().evicted;
            }
        }
        assert_eq!(victim.unwrap().fam_block_address, addr);
    }

    #[test]
    fn default_geometry_budget() {
        let g = DcacheGeometry::default();
        assert_eq!(g.sets(), 4096);
        assert_eq!(g.entries(), 65536);
        assert_eq!(g.tag_bits(), 28);
        assert!(g.entry_payload_bytes() <= 7);
    }

    #[test]
    fn fold_spreads_uniform_blocks() {
        use rand::{RngExt, SeedableRng};
        let c = DcacheMeta::new(DcacheGeometry::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut hist = vec![0u32; 4096];
        let n = 1_000_000u32;
        for _ in 0..n {
            let block: u64 = rng.random_range(0..(1u64 << 40));
            hist[c.set_index(block << 8) as usize] += 1;
        }
        let mean = n as f64 / 4096.0;
        assert!(*hist.iter().max().unwrap() as f64 <= 2.0 * mean);
    }
}

//! Signature Path Prefetcher, parameterized by block size.
//!
//! A signature table keyed by page remembers the last block offset touched
//! in that page plus a 12-bit compressed history of the deltas seen there.
//! A pattern table keyed by signature counts which deltas followed that
//! history. Prediction walks the pattern table speculatively, multiplying
//! per-step confidences, until the path runs out of confidence, hits the
//! page edge, or reaches the requested degree.
//!
//! The same engine backs the per-core prefetcher (64 B blocks) and the
//! DRAM-cache prefetcher (sub-page blocks).

use std::collections::{HashMap, VecDeque};

use crate::error::SimError;
use crate::request::PAGE_BYTES;

pub const SIGNATURE_BITS: u32 = 12;
pub const SIGNATURE_MASK: u16 = (1 << SIGNATURE_BITS) - 1;
/// Saturation point for signature and delta weights.
pub const COUNTER_MAX: u8 = 255;
pub const DELTA_SLOTS: usize = 4;
/// Block sizes the engine accepts.
pub const BLOCK_SIZES: [u64; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

/// Maps a signed block delta to its 7-bit sign-magnitude code.
pub fn encode_delta(delta: i32) -> u16 {
    let mag = (delta.unsigned_abs() & 0x3f) as u16;
    if delta < 0 {
        0x40 | mag
    } else {
        mag
    }
}

/// `((sig << 4) ^ encode(delta))` truncated to 12 bits.
pub fn update_signature(sig: u16, delta: i32) -> Result<u16, SimError> {
    if delta == 0 {
        return Err(SimError::ZeroDelta);
    }
    Ok(((sig << 4) ^ encode_delta(delta)) & SIGNATURE_MASK)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SppConfig {
    pub block_size: u64,
    pub signature_entries: usize,
    pub pattern_entries: usize,
    /// Seeds the signature of a freshly touched page from recent
    /// page-crossing history.
    pub bootstrap: bool,
    pub bootstrap_entries: usize,
}

impl SppConfig {
    pub fn with_block_size(block_size: u64) -> Self {
        SppConfig {
            block_size,
            ..Default::default()
        }
    }
}

impl Default for SppConfig {
    fn default() -> Self {
        SppConfig {
            block_size: 256,
            signature_entries: 256,
            pattern_entries: 512,
            bootstrap: true,
            bootstrap_entries: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignatureTableEntry {
    pub page: u64,
    pub last_offset: u32,
    pub signature: u16,
    stamp: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeltaSlot {
    pub delta: i32,
    /// Zero marks an empty slot.
    pub weight: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternTableEntry {
    pub signature: u16,
    pub sig_weight: u8,
    pub slots: [DeltaSlot; DELTA_SLOTS],
}

impl PatternTableEntry {
    fn new(signature: u16) -> Self {
        PatternTableEntry {
            signature,
            sig_weight: 0,
            slots: [DeltaSlot::default(); DELTA_SLOTS],
        }
    }

    fn halve(&mut self) {
        self.sig_weight /= 2;
        for s in &mut self.slots {
            s.weight /= 2;
        }
    }

    fn record(&mut self, delta: i32) {
        if self.sig_weight == COUNTER_MAX {
            self.halve();
        }
        if let Some(slot) = self
            .slots
            .iter_mut()
            .find(|s| s.weight > 0 && s.delta == delta)
        {
            slot.weight += 1;
        } else {
            let victim = match self.slots.iter().position(|s| s.weight == 0) {
                Some(i) => i,
                None => {
                    // lowest weight, later slot on ties
                    let mut best = 0;
                    for (i, s) in self.slots.iter().enumerate() {
                        if s.weight <= self.slots[best].weight {
                            best = i;
                        }
                    }
                    best
                }
            };
            self.slots[victim] = DeltaSlot { delta, weight: 1 };
        }
        self.sig_weight += 1;
    }

    /// Highest-weight delta; the earliest slot wins ties.
    pub fn best(&self) -> Option<DeltaSlot> {
        let mut best: Option<DeltaSlot> = None;
        for s in self.slots.iter().filter(|s| s.weight > 0) {
            if best.is_none_or(|b| s.weight > b.weight) {
                best = Some(*s);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HistoryEntry {
    signature: u16,
    delta: i32,
    next_offset: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefetchCandidate {
    pub block_address: u64,
    pub confidence: f64,
    pub depth: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainOutcome {
    /// First touch of a page. `signature` is the seeded starting signature.
    NewPage {
        signature: u16,
    },
    /// Same block as the previous miss in this page.
    SameBlock,
    Trained {
        delta: i32,
        signature: u16,
    },
}

#[derive(Clone, Debug)]
pub struct SppState {
    cfg: SppConfig,
    signatures: Vec<SignatureTableEntry>,
    page_index: HashMap<u64, usize>,
    patterns: Vec<Option<PatternTableEntry>>,
    history: VecDeque<HistoryEntry>,
    clock: u64,
}

impl SppState {
    pub fn new(cfg: SppConfig) -> Result<Self, SimError> {
        if !BLOCK_SIZES.contains(&cfg.block_size) {
            return Err(SimError::config(
                "block_size",
                format!("{} is not one of {:?}", cfg.block_size, BLOCK_SIZES),
            ));
        }
        if cfg.signature_entries == 0 || cfg.pattern_entries == 0 {
            return Err(SimError::config("spp", "table sizes must be nonzero"));
        }
        Ok(SppState {
            cfg,
            signatures: Vec::with_capacity(cfg.signature_entries),
            page_index: HashMap::with_capacity(cfg.signature_entries),
            patterns: vec![None; cfg.pattern_entries],
            history: VecDeque::with_capacity(cfg.bootstrap_entries),
            clock: 0,
        })
    }

    pub fn config(&self) -> &SppConfig {
        &self.cfg
    }

    pub fn block_size(&self) -> u64 {
        self.cfg.block_size
    }

    pub fn blocks_per_page(&self) -> u32 {
        (PAGE_BYTES / self.cfg.block_size) as u32
    }

    fn split(&self, address: u64) -> (u64, u32) {
        let page = address / PAGE_BYTES;
        let offset = ((address % PAGE_BYTES) / self.cfg.block_size) as u32;
        (page, offset)
    }

    pub fn signature_entry(&self, page: u64) -> Option<&SignatureTableEntry> {
        self.page_index.get(&page).map(|&i| &self.signatures[i])
    }

    pub fn pattern_entry(&self, signature: u16) -> Option<&PatternTableEntry> {
        let idx = signature as usize % self.patterns.len();
        self.patterns[idx]
            .as_ref()
            .filter(|e| e.signature == signature)
    }

    pub fn pattern_entries(&self) -> impl Iterator<Item = &PatternTableEntry> {
        self.patterns.iter().flatten()
    }

    fn pattern_slot(&mut self, signature: u16) -> &mut PatternTableEntry {
        let idx = signature as usize % self.patterns.len();
        let slot = &mut self.patterns[idx];
        if slot.as_ref().is_none_or(|e| e.signature != signature) {
            *slot = Some(PatternTableEntry::new(signature));
        }
        slot.as_mut().unwrap()
    }

    fn bootstrap_signature(&self, offset: u32) -> u16 {
        if !self.cfg.bootstrap {
            return 0;
        }
        self.history
            .iter()
            .find(|h| h.next_offset == offset)
            .and_then(|h| update_signature(h.signature, h.delta).ok())
            .unwrap_or(0)
    }

    fn remember_crossing(&mut self, signature: u16, delta: i32, offset: u32) {
        if !self.cfg.bootstrap || self.cfg.bootstrap_entries == 0 {
            return;
        }
        let bpp = self.blocks_per_page() as i64;
        let next = offset as i64 + delta as i64;
        if (0..bpp).contains(&next) {
            return;
        }
        if self.history.len() == self.cfg.bootstrap_entries {
            self.history.pop_back();
        }
        self.history.push_front(HistoryEntry {
            signature,
            delta,
            next_offset: next.rem_euclid(bpp) as u32,
        });
    }

    fn insert_page(&mut self, page: u64, offset: u32, signature: u16) {
        let entry = SignatureTableEntry {
            page,
            last_offset: offset,
            signature,
            stamp: self.clock,
        };
        if self.signatures.len() < self.cfg.signature_entries {
            self.page_index.insert(page, self.signatures.len());
            self.signatures.push(entry);
            return;
        }
        let (victim, _) = self
            .signatures
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| e.stamp)
            .expect("table is full");
        self.page_index.remove(&self.signatures[victim].page);
        self.page_index.insert(page, victim);
        self.signatures[victim] = entry;
    }

    /// Updates both tables with a miss at `address`.
    pub fn train(&mut self, address: u64) -> TrainOutcome {
        self.clock += 1;
        let (page, offset) = self.split(address);
        let Some(&idx) = self.page_index.get(&page) else {
            let signature = self.bootstrap_signature(offset);
            self.insert_page(page, offset, signature);
            return TrainOutcome::NewPage { signature };
        };
        let clock = self.clock;
        let entry = &mut self.signatures[idx];
        entry.stamp = clock;
        let delta = offset as i32 - entry.last_offset as i32;
        if delta == 0 {
            return TrainOutcome::SameBlock;
        }
        let prev = entry.signature;
        let signature = update_signature(prev, delta).expect("nonzero delta");
        entry.signature = signature;
        entry.last_offset = offset;
        self.pattern_slot(prev).record(delta);
        self.remember_crossing(signature, delta, offset);
        TrainOutcome::Trained { delta, signature }
    }

    /// Lookahead prediction from the page state of `address`.
    pub fn predict(
        &self,
        address: u64,
        degree: usize,
        confidence_floor: f64,
    ) -> Vec<PrefetchCandidate> {
        let mut out = Vec::with_capacity(degree);
        let (page, origin) = self.split(address);
        let Some(entry) = self.signature_entry(page) else {
            return out;
        };
        let bpp = self.blocks_per_page() as i64;
        let mut signature = entry.signature;
        let mut offset = origin as i64;
        let mut confidence = 1.0f64;
        for depth in 1..=degree as u32 {
            let Some(pattern) = self.pattern_entry(signature) else {
                break;
            };
            let Some(slot) = pattern.best() else {
                break;
            };
            confidence *= slot.weight as f64 / pattern.sig_weight as f64;
            if confidence < confidence_floor {
                break;
            }
            offset += slot.delta as i64;
            if !(0..bpp).contains(&offset) {
                break;
            }
            let block_address = page * PAGE_BYTES + offset as u64 * self.cfg.block_size;
            if offset != origin as i64
                && out
                    .iter()
                    .all(|c: &PrefetchCandidate| c.block_address != block_address)
            {
                out.push(PrefetchCandidate {
                    block_address,
                    confidence,
                    depth,
                });
            }
            signature = update_signature(signature, slot.delta).expect("slots never hold zero");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-by-bit rebuild of the signature update, independent of the
    /// shift/xor expression used above.
    fn oracle(sig: u16, delta: i32) -> u16 {
        let mut sig_bits = [false; 12];
        for (i, b) in sig_bits.iter_mut().enumerate() {
            *b = (sig >> i) & 1 == 1;
        }
        let mut shifted = [false; 12];
        shifted[4..12].copy_from_slice(&sig_bits[..8]);
        let mag = delta.unsigned_abs();
        let mut code = [false; 12];
        for (i, c) in code.iter_mut().enumerate().take(6) {
            *c = (mag >> i) & 1 == 1;
        }
        code[6] = delta < 0;
        let mut out = 0u16;
        for i in 0..12 {
            if shifted[i] != code[i] {
                out |= 1 << i;
            }
        }
        out
    }

    #[test]
    fn signature_examples() {
        assert_eq!(update_signature(0x000, 2).unwrap(), 0x002);
        assert_eq!(update_signature(0x002, 4).unwrap(), 0x024);
        assert_eq!(update_signature(0xFFF, 1).unwrap(), 0xFF1);
        assert_eq!(update_signature(0x000, -1).unwrap(), 0x041);
        assert!(update_signature(0x123, 0).is_err());
    }

    #[test]
    fn signature_matches_oracle_on_random_inputs() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5ee);
        for _ in 0..1000 {
            let sig = rng.random_range(0..=SIGNATURE_MASK);
            let mut delta = rng.random_range(-63..=63);
            if delta == 0 {
                delta = 1;
            }
            assert_eq!(update_signature(sig, delta).unwrap(), oracle(sig, delta));
        }
    }

    fn spp(block: u64) -> SppState {
        SppState::new(SppConfig::with_block_size(block)).unwrap()
    }

    #[test]
    fn first_touch_and_second_access() {
        let mut s = spp(64);
        let page = 0xA000;
        assert_eq!(
            s.train(page + 3 * 64),
            TrainOutcome::NewPage { signature: 0 }
        );
        let e = s.signature_entry(page / PAGE_BYTES).unwrap();
        assert_eq!((e.last_offset, e.signature), (3, 0));
        assert_eq!(s.pattern_entries().count(), 0);

        assert_eq!(
            s.train(page + 5 * 64),
            TrainOutcome::Trained {
                delta: 2,
                signature: 0x002
            }
        );
        let p = s.pattern_entry(0).unwrap();
        assert_eq!(p.sig_weight, 1);
        assert_eq!(
            p.best(),
            Some(DeltaSlot {
                delta: 2,
                weight: 1
            })
        );
        assert_eq!(
            s.signature_entry(page / PAGE_BYTES).unwrap().signature,
            0x002
        );
    }

    #[test]
    fn same_block_does_not_train() {
        let mut s = spp(256);
        s.train(0x1000);
        assert_eq!(s.train(0x1000 + 64), TrainOutcome::SameBlock);
        assert_eq!(s.pattern_entries().count(), 0);
    }

    #[test]
    fn untrained_predicts_nothing() {
        let s = spp(256);
        assert!(s.predict(0x4000, 4, 0.25).is_empty());
    }

    #[test]
    fn stride_one_block_predicts_next_four() {
        let mut s = spp(256);
        // warm over a few pages, stop mid-page
        let mut addr = 0x10_0000;
        for _ in 0..(16 * 4 + 5) {
            s.train(addr);
            addr += 256;
        }
        let last = addr - 256;
        let c = s.predict(last, 4, 0.25);
        let got: Vec<u64> = c.iter().map(|c| c.block_address).collect();
        assert_eq!(got, [last + 256, last + 512, last + 768, last + 1024]);
        assert!(c.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn page_edge_drops_candidates() {
        let mut s = spp(256);
        let mut addr = 0x20_0000;
        for _ in 0..(16 * 3 + 14) {
            s.train(addr);
            addr += 256;
        }
        // last trained block is offset 13 of its page: only 14 and 15 remain
        let last = addr - 256;
        assert_eq!((last % PAGE_BYTES) / 256, 13);
        let c = s.predict(last, 4, 0.25);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn bootstrap_carries_signature_across_pages() {
        let mut s = spp(256);
        for i in 0..32u64 {
            s.train(0x30_0000 + i * 256);
        }
        // first touch of the third page is seeded from the crossing
        match s.train(0x30_0000 + 32 * 256) {
            TrainOutcome::NewPage { signature } => assert_ne!(signature, 0),
            other => panic!("{other:?}"),
        }
        let mut off = SppState::new(SppConfig {
            bootstrap: false,
            ..SppConfig::with_block_size(256)
        })
        .unwrap();
        for i in 0..33u64 {
            off.train(0x30_0000 + i * 256);
        }
        assert_eq!(off.signature_entry(0x302).unwrap().signature, 0);
    }

    #[test]
    fn repeated_stride_saturates_and_halves() {
        // Three accesses per page, fresh page each time, no bootstrap:
        // every page adds one +1 to pattern[0].
        let mut s = SppState::new(SppConfig {
            bootstrap: false,
            signature_entries: 1024,
            ..SppConfig::with_block_size(64)
        })
        .unwrap();
        let mut max_seen = 0;
        for p in 0..300u64 {
            for o in 0..3 {
                s.train(p * PAGE_BYTES + o * 64);
            }
            let e = s.pattern_entry(0).unwrap();
            max_seen = max_seen.max(e.best().unwrap().weight);
            assert_eq!(e.best().unwrap().weight, e.sig_weight);
        }
        assert_eq!(max_seen, COUNTER_MAX);
    }

    #[test]
    fn signature_table_evicts_lru_page() {
        let mut s = SppState::new(SppConfig {
            signature_entries: 2,
            ..SppConfig::with_block_size(64)
        })
        .unwrap();
        s.train(0x1000);
        s.train(0x2000);
        s.train(0x1040); // touch page 1
        s.train(0x3000); // evicts page 2
        assert!(s.signature_entry(1).is_some());
        assert!(s.signature_entry(2).is_none());
        assert!(s.signature_entry(3).is_some());
    }

    #[test]
    fn rejects_unsupported_block_size() {
        assert!(SppState::new(SppConfig::with_block_size(96)).is_err());
    }

    proptest! {
        #[test]
        fn prop_signature_oracle(sig in 0u16..=SIGNATURE_MASK, delta in -63i32..=63) {
            prop_assume!(delta != 0);
            prop_assert_eq!(update_signature(sig, delta).unwrap(), oracle(sig, delta));
        }

        #[test]
        fn prop_predict_well_formed(
            block_idx in 0usize..BLOCK_SIZES.len() - 1,
            offsets in proptest::collection::vec((0u64..4, 0u64..4096), 1..300),
            degree in 1usize..8,
        ) {
            let block = BLOCK_SIZES[block_idx];
            let mut s = spp(block);
            for &(page, off) in &offsets {
                let addr = page * PAGE_BYTES + off;
                s.train(addr);
                for e in s.pattern_entries() {
                    for slot in &e.slots {
                        prop_assert!(slot.weight <= e.sig_weight);
                    }
                }
                let c = s.predict(addr, degree, 0.0);
                prop_assert!(c.len() <= degree);
                for (i, cand) in c.iter().enumerate() {
                    prop_assert_eq!(cand.block_address % block, 0);
                    prop_assert_eq!(cand.block_address / PAGE_BYTES, page);
                    prop_assert!((0.0..=1.0).contains(&cand.confidence));
                    prop_assert!(c[..i].iter().all(|o| o.block_address != cand.block_address));
                    if i > 0 {
                        prop_assert!(cand.confidence <= c[i - 1].confidence);
                    }
                }
            }
        }

        #[test]
        fn prop_stride_confident_after_warmup(stride in 1u64..4, start in 0u64..64) {
            // 64 B blocks, stride in blocks; query at an in-page position
            let mut s = spp(64);
            let mut addr = start * PAGE_BYTES;
            let mut last = addr;
            for _ in 0..64 {
                s.train(addr);
                last = addr;
                addr += stride * 64;
            }
            // walk forward until the next block stays in the page
            while (last % PAGE_BYTES) + stride * 64 >= PAGE_BYTES {
                last += stride * 64;
                s.train(last);
            }
            let c = s.predict(last, 1, 0.0);
            prop_assert_eq!(c.len(), 1);
            prop_assert_eq!(c[0].block_address, last + stride * 64);
            prop_assert!(c[0].confidence >= 0.9);
        }
    }
}

//! LLC-miss stream sources.
//!
//! Each node draws accesses from a synthetic generator or from a trace. The
//! stream is defined to be what misses the last-level cache, so there is no
//! cache model in front of it. A [`CoreModel`] bounds how many demand reads
//! may be in flight and how fast new ones are issued.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::engine::SimTime;
use crate::error::SimError;
use crate::request::{LINE_BYTES, PAGE_BYTES};

pub const ADDRESS_LIMIT: u64 = 1 << crate::request::ADDRESS_BITS;
/// Each node's private region starts at `node << NODE_SHIFT`.
pub const NODE_SHIFT: u32 = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AccessRecord {
    pub node: u16,
    pub kind: AccessKind,
    pub address: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoreModel {
    pub max_outstanding: usize,
    pub issue_gap: SimTime,
}

impl Default for CoreModel {
    fn default() -> Self {
        CoreModel {
            max_outstanding: 16,
            issue_gap: SimTime(303),
        }
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    Local,
    Fam,
}

/// Splits pages between local DRAM and FAM at `ratio : 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AddressMap {
    pub ratio: f64,
    pub seed: u64,
}

impl AddressMap {
    pub fn new(ratio: f64, seed: u64) -> Self {
        AddressMap { ratio, seed }
    }

    pub fn fam_probability(&self) -> f64 {
        if self.ratio.is_infinite() {
            1.0
        } else {
            self.ratio / (self.ratio + 1.0)
        }
    }

    pub fn classify(&self, address: u64) -> Placement {
        let page = address / PAGE_BYTES;
        let p = self.fam_probability();
        if p <= 0.0 {
            return Placement::Local;
        }
        if p >= 1.0 {
            return Placement::Fam;
        }
        let h = mix64(page ^ mix64(self.seed));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < p {
            Placement::Fam
        } else {
            Placement::Local
        }
    }
}

/// Synthetic generator selection. Textual form is used in config files.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorSpec {
    Sequential,
    Stride(u64),
    Uniform,
    Zipf(f64),
    PointerChase,
    /// Jump to a random page, then touch `len` addresses `stride` bytes apart.
    Runs {
        len: u32,
        stride: u64,
    },
    Mixed(Vec<GeneratorSpec>),
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorSpec::Sequential => write!(f, "sequential"),
            GeneratorSpec::Stride(k) => write!(f, "stride:{k}"),
            GeneratorSpec::Uniform => write!(f, "uniform"),
            GeneratorSpec::Zipf(a) => write!(f, "zipf:{a}"),
            GeneratorSpec::PointerChase => write!(f, "pointer_chase"),
            GeneratorSpec::Runs { len, stride } => write!(f, "runs:{len}:{stride}"),
            GeneratorSpec::Mixed(parts) => {
                write!(f, "mixed(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for GeneratorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("mixed(").and_then(|r| r.strip_suffix(')')) {
            let parts = split_top_level(inner)
                .into_iter()
                .map(str::parse)
                .collect::<Result<Vec<_>, _>>()?;
            if parts.is_empty() {
                return Err("mixed() needs at least one generator".into());
            }
            return Ok(GeneratorSpec::Mixed(parts));
        }
        let mut it = s.split(':');
        let name = it.next().unwrap_or_default();
        let args: Vec<&str> = it.collect();
        let num = |i: usize| -> Result<u64, String> {
            args.get(i)
                .ok_or_else(|| format!("{name}: missing argument"))?
                .parse::<u64>()
                .map_err(|e| format!("{name}: {e}"))
        };
        let spec = match (name, args.len()) {
            ("sequential", 0) => GeneratorSpec::Sequential,
            ("stride", 1) => {
                let k = num(0)?;
                if k == 0 {
                    return Err("stride must be positive".into());
                }
                GeneratorSpec::Stride(k)
            }
            ("uniform", 0) => GeneratorSpec::Uniform,
            ("zipf", 1) => {
                let a: f64 = args[0].parse().map_err(|e| format!("zipf: {e}"))?;
                if a.is_nan() || a < 0.0 {
                    return Err("zipf exponent must be non-negative".into());
                }
                GeneratorSpec::Zipf(a)
            }
            ("pointer_chase", 0) => GeneratorSpec::PointerChase,
            ("runs", 2) => {
                let len = num(0)? as u32;
                let stride = num(1)?;
                if len == 0 || stride == 0 {
                    return Err("runs needs positive length and stride".into());
                }
                GeneratorSpec::Runs { len, stride }
            }
            _ => return Err(format!("unknown generator `{s}`")),
        };
        Ok(spec)
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = vec![];
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !s[start..].trim().is_empty() {
        out.push(&s[start..]);
    }
    out
}

#[derive(Clone, Debug)]
enum GenState {
    Sequential {
        next: u64,
    },
    Stride {
        stride: u64,
        next: u64,
    },
    Uniform,
    Zipf {
        dist: Zipf<f64>,
        pages: u64,
    },
    PointerChase {
        cur: u64,
    },
    Runs {
        len: u32,
        stride: u64,
        left: u32,
        cur: u64,
    },
    Mixed(Vec<GenState>),
}

impl GenState {
    fn new(spec: &GeneratorSpec, footprint: u64) -> GenState {
        let pages = (footprint / PAGE_BYTES).max(1);
        match spec {
            GeneratorSpec::Sequential => GenState::Sequential { next: 0 },
            GeneratorSpec::Stride(k) => GenState::Stride {
                stride: *k,
                next: 0,
            },
            GeneratorSpec::Uniform => GenState::Uniform,
            GeneratorSpec::Zipf(a) => GenState::Zipf {
                dist: Zipf::new(pages as f64, *a).expect("validated exponent"),
                pages,
            },
            GeneratorSpec::PointerChase => GenState::PointerChase { cur: 0 },
            GeneratorSpec::Runs { len, stride } => GenState::Runs {
                len: *len,
                stride: *stride,
                left: 0,
                cur: 0,
            },
            GeneratorSpec::Mixed(parts) => {
                GenState::Mixed(parts.iter().map(|p| GenState::new(p, footprint)).collect())
            }
        }
    }

    /// Offset within the footprint.
    fn next(&mut self, rng: &mut ChaCha8Rng, footprint: u64) -> u64 {
        let lines = (footprint / LINE_BYTES).max(1);
        match self {
            GenState::Sequential { next } => {
                let a = *next;
                *next = (*next + LINE_BYTES) % footprint;
                a
            }
            GenState::Stride { stride, next } => {
                let a = *next;
                *next = (*next + *stride) % footprint;
                a
            }
            GenState::Uniform => rng.random_range(0..lines) * LINE_BYTES,
            GenState::Zipf { dist, pages } => {
                let rank = dist.sample(rng) as u64 - 1;
                // scatter ranks over the footprint so hot pages are not adjacent
                let page = mix64(rank) % *pages;
                page * PAGE_BYTES + rng.random_range(0..PAGE_BYTES / LINE_BYTES) * LINE_BYTES
            }
            GenState::PointerChase { cur } => {
                let a = *cur;
                *cur = (mix64(*cur ^ 0x5bd1_e995) % lines) * LINE_BYTES;
                a
            }
            GenState::Runs {
                len,
                stride,
                left,
                cur,
            } => {
                if *left == 0 {
                    let span = (*len as u64 - 1) * *stride;
                    let pages = (footprint / PAGE_BYTES).max(1);
                    let page = rng.random_range(0..pages);
                    let room = PAGE_BYTES.saturating_sub(span).max(LINE_BYTES);
                    let start = rng.random_range(0..room / LINE_BYTES) * LINE_BYTES;
                    *cur = page * PAGE_BYTES + start;
                    *left = *len;
                }
                let a = *cur;
                *cur += *stride;
                *left -= 1;
                a % footprint
            }
            GenState::Mixed(parts) => {
                let i = rng.random_range(0..parts.len());
                parts[i].next(rng, footprint)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSource {
    node: u16,
    spec: GeneratorSpec,
    state: GenState,
    rng: ChaCha8Rng,
    footprint: u64,
    write_fraction: f64,
}

impl SyntheticSource {
    pub fn new(
        node: u16,
        spec: &GeneratorSpec,
        footprint: u64,
        write_fraction: f64,
        seed: u64,
    ) -> Self {
        let footprint = footprint.max(PAGE_BYTES);
        SyntheticSource {
            node,
            spec: spec.clone(),
            state: GenState::new(spec, footprint),
            rng: ChaCha8Rng::seed_from_u64(mix64(seed ^ (node as u64) << 32)),
            footprint,
            write_fraction,
        }
    }

    /// Whether each access must wait for the previous one's data.
    pub fn dependent(&self) -> bool {
        matches!(self.spec, GeneratorSpec::PointerChase)
    }

    pub fn next_access(&mut self) -> AccessRecord {
        let offset = self.state.next(&mut self.rng, self.footprint);
        let kind =
            if self.write_fraction > 0.0 && self.rng.random_bool(self.write_fraction.min(1.0)) {
                AccessKind::Write
            } else {
                AccessKind::Read
            };
        AccessRecord {
            node: self.node,
            kind,
            address: ((self.node as u64) << NODE_SHIFT) + offset,
        }
    }
}

/// Parses one trace line: `<node_id> <R|W> <hex address>`.
pub fn parse_trace_line(line: &str) -> Result<Option<AccessRecord>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let mut f = line.split_whitespace();
    let node = f
        .next()
        .ok_or("missing node id")?
        .parse::<u16>()
        .map_err(|e| format!("node id: {e}"))?;
    let kind = match f.next().ok_or("missing access kind")? {
        "R" | "r" => AccessKind::Read,
        "W" | "w" => AccessKind::Write,
        k => return Err(format!("access kind `{k}` is not R or W")),
    };
    let raw = f.next().ok_or("missing address")?;
    let hex = raw
        .strip_prefix("0x")
        .or_else(|| raw.strip_prefix("0X"))
        .unwrap_or(raw);
    let address = u64::from_str_radix(hex, 16).map_err(|e| format!("address `{raw}`: {e}"))?;
    if address >= ADDRESS_LIMIT {
        return Err(format!("address {address:#x} exceeds 48 bits"));
    }
    if let Some(extra) = f.next() {
        return Err(format!("unexpected trailing field `{extra}`"));
    }
    Ok(Some(AccessRecord {
        node,
        kind,
        address,
    }))
}

pub fn parse_trace(text: &str, path: &str) -> Result<Vec<AccessRecord>, SimError> {
    let mut out = vec![];
    for (i, line) in text.lines().enumerate() {
        match parse_trace_line(line) {
            Ok(Some(r)) => out.push(r),
            Ok(None) => {}
            Err(reason) => {
                return Err(SimError::TraceParse {
                    path: path.to_string(),
                    line: i + 1,
                    reason,
                })
            }
        }
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<(Vec<AccessRecord>, String), SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let recs = parse_trace(&text, &path.display().to_string())?;
    Ok((recs, text))
}

/// Replays the records of one node, in file order.
#[derive(Clone, Debug)]
pub struct TraceSource {
    records: Vec<AccessRecord>,
    pos: usize,
}

impl TraceSource {
    pub fn for_node(all: &[AccessRecord], node: u16) -> Self {
        TraceSource {
            records: all.iter().copied().filter(|r| r.node == node).collect(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn next_access(&mut self) -> Option<AccessRecord> {
        let r = self.records.get(self.pos).copied();
        self.pos += 1;
        r
    }
}

#[derive(Clone, Debug)]
pub enum AccessSource {
    Synthetic(Box<SyntheticSource>),
    Trace(TraceSource),
}

impl AccessSource {
    pub fn next_access(&mut self) -> Option<AccessRecord> {
        match self {
            AccessSource::Synthetic(s) => Some(s.next_access()),
            AccessSource::Trace(t) => t.next_access(),
        }
    }

    pub fn dependent(&self) -> bool {
        match self {
            AccessSource::Synthetic(s) => s.dependent(),
            AccessSource::Trace(_) => false,
        }
    }
}

/// Order-sensitive running hash of an access stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fingerprint(pub u64);

impl Default for Fingerprint {
    fn default() -> Self {
        Fingerprint(0xcbf2_9ce4_8422_2325)
    }
}

impl Fingerprint {
    pub fn absorb(&mut self, r: &AccessRecord) {
        let kind = matches!(r.kind, AccessKind::Write) as u64;
        let word = r.address ^ ((r.node as u64) << 48) ^ (kind << 63);
        self.0 = mix64(self.0 ^ word);
    }

    pub fn combine(self, other: Fingerprint) -> Fingerprint {
        Fingerprint(mix64(self.0.rotate_left(17) ^ other.0))
    }
}

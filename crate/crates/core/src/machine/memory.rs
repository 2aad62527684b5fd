use std::collections::BTreeMap;

use serde::Serialize;

use super::config::ArchConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RegionKind {
    Constant,
    Scratchpad,
    Instruction,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Constant => "constant",
            RegionKind::Scratchpad => "scratchpad",
            RegionKind::Instruction => "instruction",
        }
    }
}

/// A request for memory. Scratchpad regions start on a slice boundary and
/// span at least `stripe` slices so that `stripe` vectors can be read (or
/// written) per cycle through distinct slice ports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub kind: RegionKind,
    pub bytes: u64,
    pub stripe: u16,
}

impl Region {
    pub fn constant(name: impl Into<String>, bytes: u64) -> Self {
        Region { name: name.into(), kind: RegionKind::Constant, bytes, stripe: 1 }
    }

    pub fn scratch(name: impl Into<String>, bytes: u64, stripe: u16) -> Self {
        Region { name: name.into(), kind: RegionKind::Scratchpad, bytes, stripe: stripe.max(1) }
    }

    pub fn instructions(name: impl Into<String>, bytes: u64) -> Self {
        Region { name: name.into(), kind: RegionKind::Instruction, bytes, stripe: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub slice: u16,
    pub offset: u64,
    pub length: u64,
    pub kind: RegionKind,
    /// Bytes held back from other regions (length rounded up to the alignment).
    pub extent: u64,
    pub stripe: u16,
}

impl Placement {
    /// Slices whose ports serve this region, in stripe order.
    pub fn port_slices(&self) -> std::ops::Range<u16> {
        self.slice..self.slice + self.stripe
    }
}

/// Per-slice allocation table over the flat SRAM address space.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMap {
    slice_bytes: u64,
    slice_count: u16,
    regions: BTreeMap<String, Placement>,
}

impl MemoryMap {
    pub fn empty(cfg: &ArchConfig) -> Self {
        MemoryMap { slice_bytes: cfg.slice_bytes, slice_count: cfg.mem_slice_count as u16, regions: BTreeMap::new() }
    }

    pub fn capacity(&self) -> u64 {
        self.slice_bytes * self.slice_count as u64
    }

    pub fn slice_bytes(&self) -> u64 {
        self.slice_bytes
    }

    pub fn get(&self, name: &str) -> Option<&Placement> {
        self.regions.get(name)
    }

    pub fn regions(&self) -> impl Iterator<Item = (&str, &Placement)> {
        self.regions.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn addr(&self, p: &Placement) -> u64 {
        p.slice as u64 * self.slice_bytes + p.offset
    }

    /// Lowest free address for `r`, honoring its alignment.
    pub fn alloc(&mut self, r: &Region) -> Result<Placement> {
        if self.regions.contains_key(&r.name) {
            return Err(Error::Params(format!("region `{}` allocated twice", r.name)));
        }
        let sb = self.slice_bytes;
        let (align, extent) = match r.kind {
            RegionKind::Scratchpad => {
                let slices = r.bytes.div_ceil(sb).max(r.stripe as u64).max(1);
                (sb, slices * sb)
            }
            _ => (1, r.bytes),
        };
        let mut taken: Vec<(u64, u64)> = self.regions.values().map(|p| (self.addr(p), self.addr(p) + p.extent)).collect();
        taken.sort_unstable();
        let mut cand = 0u64;
        for &(lo, hi) in &taken {
            if cand + extent <= lo {
                break;
            }
            cand = cand.max(hi.div_ceil(align) * align);
        }
        if cand + extent > self.capacity() {
            let used: u64 = taken.iter().map(|(lo, hi)| hi - lo).sum();
            return Err(Error::OutOfMemory {
                region: r.name.clone(),
                needed: extent,
                available: self.capacity() - used,
            });
        }
        let stripe = match r.kind {
            RegionKind::Scratchpad => (extent / sb) as u16,
            _ => 1,
        };
        let p = Placement { slice: (cand / sb) as u16, offset: cand % sb, length: r.bytes, kind: r.kind, extent, stripe };
        self.regions.insert(r.name.clone(), p);
        Ok(p)
    }

    pub fn free(&mut self, name: &str) -> Option<Placement> {
        self.regions.remove(name)
    }

    pub fn bytes_of(&self, kind: RegionKind) -> u64 {
        self.regions.values().filter(|p| p.kind == kind).map(|p| p.length).sum()
    }

    /// Fractions of capacity held by each kind, then the unused remainder.
    pub fn utilization(&self) -> Utilization {
        let cap = self.capacity() as f64;
        let constant = self.bytes_of(RegionKind::Constant) as f64 / cap;
        let scratchpad = self.bytes_of(RegionKind::Scratchpad) as f64 / cap;
        let instruction = self.bytes_of(RegionKind::Instruction) as f64 / cap;
        Utilization { constant, scratchpad, instruction, unused: 1.0 - constant - scratchpad - instruction }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Utilization {
    pub constant: f64,
    pub scratchpad: f64,
    pub instruction: f64,
    pub unused: f64,
}

/// First-fit placement of `regions`: constants first, then scratchpad, then
/// instruction memory, each group in request order.
pub fn alloc_memory(regions: &[Region], cfg: &ArchConfig) -> Result<MemoryMap> {
    let mut map = MemoryMap::empty(cfg);
    let mut order: Vec<&Region> = regions.iter().collect();
    order.sort_by_key(|r| r.kind);
    for r in order {
        map.alloc(r)?;
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ArchConfig {
        ArchConfig::default()
    }

    #[test]
    fn empty_map_is_all_free() {
        let m = alloc_memory(&[], &cfg()).unwrap();
        let u = m.utilization();
        assert_eq!((u.constant, u.scratchpad, u.instruction, u.unused), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn slice_sized_region_takes_one_slice() {
        let sb = cfg().slice_bytes;
        let m = alloc_memory(&[Region::scratch("a", sb, 1), Region::scratch("b", 1, 1)], &cfg()).unwrap();
        let a = m.get("a").unwrap();
        assert_eq!((a.slice, a.offset, a.port_slices()), (0, 0, 0..1));
        assert_eq!(m.get("b").unwrap().slice, 1);
    }

    #[test]
    fn constants_pack_before_scratch() {
        let m = alloc_memory(
            &[Region::scratch("s", 10, 4), Region::constant("w0", 100), Region::constant("w1", 50)],
            &cfg(),
        )
        .unwrap();
        assert_eq!(m.get("w0").unwrap().offset, 0);
        assert_eq!(m.get("w1").unwrap().offset, 100);
        let s = m.get("s").unwrap();
        assert_eq!((s.slice, s.offset, s.stripe), (1, 0, 4));
    }

    #[test]
    fn out_of_memory_names_region() {
        let big = cfg().sram_bytes();
        let err = alloc_memory(&[Region::constant("w", big - 10), Region::constant("huge", 11)], &cfg()).unwrap_err();
        match err {
            Error::OutOfMemory { region, needed, available } => {
                assert_eq!((region.as_str(), needed, available), ("huge", 11, 10));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn free_then_realloc_is_deterministic() {
        let rs = [Region::constant("a", 300), Region::constant("b", 200), Region::scratch("c", 5, 1)];
        let mut m = alloc_memory(&rs, &cfg()).unwrap();
        let before = m.clone();
        m.free("a");
        m.alloc(&rs[0]).unwrap();
        assert_eq!(m, before);
    }

    proptest! {
        #[test]
        fn never_double_books(sizes in proptest::collection::vec((1u64..3_000_000, 0u8..3), 1..30)) {
            let c = cfg();
            let regions: Vec<Region> = sizes.iter().enumerate().map(|(i, &(b, k))| match k {
                0 => Region::constant(format!("r{i}"), b),
                1 => Region::scratch(format!("r{i}"), b, 1 + (i % 4) as u16),
                _ => Region::instructions(format!("r{i}"), b),
            }).collect();
            if let Ok(m) = alloc_memory(&regions, &c) {
                let mut iv: Vec<(u64, u64)> = m.regions().map(|(_, p)| {
                    let a = p.slice as u64 * c.slice_bytes + p.offset;
                    (a, a + p.extent)
                }).collect();
                iv.sort_unstable();
                for w in iv.windows(2) {
                    prop_assert!(w[0].1 <= w[1].0);
                }
                prop_assert!(iv.last().unwrap().1 <= c.sram_bytes());
            }
        }
    }
}

//! Cycle accounting over a finished schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::machine::{ArchConfig, MemoryMap, Opcode, Unit, Utilization};
use crate::scheduler::{region_of, Block, ComputeGraph, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitUsage {
    pub class: &'static str,
    pub id: u16,
    pub busy: u64,
    pub idle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockShare {
    pub layer: u32,
    pub block: &'static str,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub total_cycles: u64,
    pub total_us: f64,
    pub units: Vec<UnitUsage>,
    /// Every cycle goes to exactly one `(layer, block)`; see [`report`].
    pub blocks: Vec<BlockShare>,
    pub layer_spans: Vec<u64>,
    pub scratchpad_high_water: u64,
    pub memory: Utilization,
}

fn all_units(cfg: &ArchConfig) -> Vec<Unit> {
    let mut v = Vec::new();
    for p in 0..cfg.mxm_plane_count as u16 {
        v.push(Unit::Mxm(p));
        v.push(Unit::Install(p));
    }
    v.extend((0..cfg.vxm_alu_count as u16).map(Unit::Alu));
    v.extend((0..cfg.sxm_port_count as u16).map(Unit::Sxm));
    v.extend((0..cfg.mem_slice_count as u16).map(Unit::MemRead));
    v.extend((0..cfg.mem_slice_count as u16).map(Unit::MemWrite));
    v
}

/// Aggregates a schedule's cycles.
///
/// Block attribution: a cycle belongs to the block of the active instruction
/// (`start <= t < completion`) that completes latest, ties to the higher id;
/// a cycle with nothing active belongs to the next instruction to issue.
pub fn report(s: &Schedule, g: Option<&ComputeGraph>, memory: &MemoryMap, cfg: &ArchConfig) -> CycleReport {
    let total = s.total_cycles();
    let ins = &s.instructions;

    let mut busy: BTreeMap<Unit, u64> = all_units(cfg).into_iter().map(|u| (u, 0)).collect();
    for i in ins {
        *busy.entry(i.unit).or_default() += i.busy_end() - i.start;
    }
    let units = busy
        .into_iter()
        .map(|(u, b)| UnitUsage { class: u.class(), id: u.id(), busy: b, idle: total.saturating_sub(b) })
        .collect();

    let key = |id: u32| {
        let n = &s.nodes[ins[id as usize].node as usize];
        (n.layer, n.block)
    };
    let mut shares: BTreeMap<(u32, Block), u64> = BTreeMap::new();
    let mut starts: Vec<(u64, u32)> = ins.iter().map(|i| (i.start, i.id)).collect();
    starts.sort_unstable();
    let mut ends: Vec<(u64, u32)> = ins.iter().map(|i| (i.completion(), i.id)).collect();
    ends.sort_unstable();
    let mut cuts: Vec<u64> = starts.iter().chain(&ends).map(|&(c, _)| c).collect();
    cuts.push(0);
    cuts.sort_unstable();
    cuts.dedup();
    let mut active: BTreeSet<(u64, u32)> = BTreeSet::new();
    let (mut si, mut ei) = (0, 0);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        while ei < ends.len() && ends[ei].0 <= a {
            active.remove(&ends[ei]);
            ei += 1;
        }
        while si < starts.len() && starts[si].0 <= a {
            let id = starts[si].1;
            active.insert((ins[id as usize].completion(), id));
            si += 1;
        }
        let owner = match active.last() {
            Some(&(_, id)) => id,
            None => starts[si].1,
        };
        *shares.entry(key(owner)).or_default() += b - a;
    }
    let blocks = shares.into_iter().map(|((layer, b), cycles)| BlockShare { layer, block: b.name(), cycles }).collect();

    let layers = s.nodes.iter().map(|n| n.layer + 1).max().unwrap_or(0);
    let layer_spans = (0..layers).map(|l| s.layer_window(l).map_or(0, |(a, b)| b - a)).collect();

    CycleReport {
        total_cycles: total,
        total_us: cfg.cycles_to_us(total),
        units,
        blocks,
        layer_spans,
        scratchpad_high_water: g.map_or(0, |g| scratch_high_water(s, g)),
        memory: memory.utilization(),
    }
}

/// Peak bytes of scratchpad tensors live at once. A tensor lives from its
/// first write (cycle 0 for preloaded inputs) to its last access; one that is
/// never read back stays live to the end.
pub fn scratch_high_water(s: &Schedule, g: &ComputeGraph) -> u64 {
    let total = s.total_cycles();
    let mut life: BTreeMap<&str, (u64, u64, bool)> = BTreeMap::new();
    for i in &s.instructions {
        if region_of(&i.tensor).is_none() {
            continue;
        }
        let e = life.entry(i.tensor.as_str()).or_insert((u64::MAX, 0, false));
        match i.opcode {
            Opcode::Write => {
                e.0 = e.0.min(i.start);
                e.1 = e.1.max(i.completion());
            }
            Opcode::Read => {
                e.1 = e.1.max(i.completion());
                e.2 = true;
            }
            _ => {}
        }
    }
    let mut deltas: BTreeMap<u64, i64> = BTreeMap::new();
    for (name, (a, mut b, read)) in life {
        let a = if a == u64::MAX { 0 } else { a };
        if !read {
            b = total;
        }
        let bytes = g.tensors.get(name).map_or(0, |t| t.bytes()) as i64;
        *deltas.entry(a).or_default() += bytes;
        *deltas.entry(b.max(a + 1)).or_default() -= bytes;
    }
    let (mut cur, mut peak) = (0i64, 0i64);
    for d in deltas.values() {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}

impl CycleReport {
    /// `key: value` text in sections.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "total_cycles: {}", self.total_cycles);
        let _ = writeln!(o, "total_us: {:.3}", self.total_us);
        let _ = writeln!(o, "scratchpad_high_water_bytes: {}", self.scratchpad_high_water);
        let _ = writeln!(o, "\n[memory]");
        let m = self.memory;
        for (k, v) in [("constant", m.constant), ("scratchpad", m.scratchpad), ("instruction", m.instruction), ("unused", m.unused)] {
            let _ = writeln!(o, "{k}: {v:.6}");
        }
        let _ = writeln!(o, "\n[layers]");
        for (l, span) in self.layer_spans.iter().enumerate() {
            let _ = writeln!(o, "layer{l}: {span}");
        }
        let _ = writeln!(o, "\n[blocks]");
        for b in &self.blocks {
            let _ = writeln!(o, "layer{}.{}: {}", b.layer, b.block, b.cycles);
        }
        let _ = writeln!(o, "\n[units]");
        for u in &self.units {
            let _ = writeln!(o, "{}{}: busy {} idle {}", u.class, u.id, u.busy, u.idle);
        }
        o
    }

    /// Tab-separated rows keyed like the schedule dump's unit columns.
    pub fn to_rows(&self) -> String {
        let mut o = String::from("section\tunit_class\tunit_id\tbusy_cycles\tidle_cycles\n");
        for u in &self.units {
            let _ = writeln!(o, "unit\t{}\t{}\t{}\t{}", u.class, u.id, u.busy, u.idle);
        }
        for b in &self.blocks {
            let _ = writeln!(o, "block\t{}\t{}\t{}\t0", b.block, b.layer, b.cycles);
        }
        o
    }

    /// Cycles attributed to `block` summed over layers.
    pub fn block_cycles(&self, block: Block) -> u64 {
        self.blocks.iter().filter(|b| b.block == block.name()).map(|b| b.cycles).sum()
    }

    pub fn class_busy(&self, class: &str) -> u64 {
        self.units.iter().filter(|u| u.class == class).map(|u| u.busy).sum()
    }
}

/// Units of `class` occupied at cycle `t`.
pub fn units_busy_at(s: &Schedule, class: &str, t: u64) -> usize {
    s.instructions
        .iter()
        .filter(|i| i.unit.class() == class && i.start <= t && t < i.busy_end())
        .map(|i| i.unit)
        .collect::<BTreeSet<_>>()
        .len()
}

//! Static conflict checks over a finished schedule.

use std::collections::BTreeMap;

use super::Schedule;
use crate::machine::Unit;

/// Every conflict found: unit or stream double-booking, unmet dependencies,
/// out-of-range streams, empty instructions. Empty means the schedule is legal.
pub fn validate_schedule(s: &Schedule) -> Result<(), Vec<String>> {
    let mut out = Vec::new();
    let ins = &s.instructions;
    let mut by_unit: BTreeMap<Unit, Vec<(u64, u64, u32)>> = BTreeMap::new();
    let mut by_stream: BTreeMap<u16, Vec<(u64, u64, u32)>> = BTreeMap::new();
    for (k, i) in ins.iter().enumerate() {
        if i.id as usize != k {
            out.push(format!("instr at position {k} has id {}", i.id));
        }
        if i.duration == 0 {
            out.push(format!("instr {} has zero duration", i.id));
        }
        if i.node as usize >= s.nodes.len() {
            out.push(format!("instr {} names unknown node {}", i.id, i.node));
        }
        for &st in i.operand_streams.iter().chain(&i.result_streams) {
            if st as usize >= s.stream_count {
                out.push(format!("instr {} uses stream {st}, only {} exist", i.id, s.stream_count));
            }
        }
        by_unit.entry(i.unit).or_default().push((i.start, i.busy_end(), i.id));
        for &st in &i.result_streams {
            by_stream.entry(st).or_default().push((i.first_result(), i.completion(), i.id));
        }
        for d in &i.deps {
            match ins.get(d.producer as usize) {
                None => out.push(format!("instr {} depends on missing instr {}", i.id, d.producer)),
                Some(p) => {
                    if let Some(v) = i.dep_violation(d, p) {
                        out.push(v);
                    }
                }
            }
        }
    }
    for (unit, mut w) in by_unit {
        for (a, b) in overlaps(&mut w) {
            out.push(format!("unit {unit} double-booked by instrs {a} and {b}"));
        }
    }
    for (st, mut w) in by_stream {
        for (a, b) in overlaps(&mut w) {
            out.push(format!("stream {st} driven by instrs {a} and {b} at once"));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

fn overlaps(w: &mut [(u64, u64, u32)]) -> Vec<(u32, u32)> {
    w.sort_unstable();
    let mut hits = Vec::new();
    let mut latest: Option<(u64, u32)> = None;
    for &(start, end, id) in w.iter() {
        if let Some((e, other)) = latest {
            if start < e {
                hits.push((other, id));
            }
        }
        if latest.is_none_or(|(e, _)| end > e) {
            latest = Some((end, id));
        }
    }
    hits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{Dep, DepKind, Instruction, Opcode};
    use crate::scheduler::{Block, NodeInfo};

    fn ins(id: u32, unit: Unit, start: u64, dur: u64, streams: Vec<u16>) -> Instruction {
        Instruction {
            id,
            unit,
            opcode: Opcode::Read,
            node: 0,
            operand_streams: vec![],
            result_streams: streams,
            start,
            duration: dur,
            latency: 1,
            vector_count: dur,
            deps: vec![],
            tensor: String::new(),
            tile: None,
        }
    }

    fn sched(instructions: Vec<Instruction>) -> Schedule {
        let nodes = vec![NodeInfo { name: "layer0.x".into(), layer: 0, block: Block::Standalone }];
        Schedule { instructions, nodes, stream_count: 4, predicted_total_cycles: 0 }
    }

    #[test]
    fn disjoint_is_clean() {
        let s = sched(vec![ins(0, Unit::MemRead(0), 0, 4, vec![0]), ins(1, Unit::MemRead(0), 4, 4, vec![0])]);
        assert!(validate_schedule(&s).is_ok());
    }

    #[test]
    fn reports_each_kind() {
        let mut late = ins(2, Unit::Alu(0), 0, 1, vec![]);
        late.deps.push(Dep { producer: 0, kind: DepKind::Barrier, hop: 1 });
        let s = sched(vec![
            ins(0, Unit::MemRead(0), 0, 4, vec![0]),
            ins(1, Unit::MemRead(0), 3, 4, vec![0]),
            late,
            ins(3, Unit::Alu(1), 0, 0, vec![9]),
        ]);
        let errs = validate_schedule(&s).unwrap_err();
        let has = |pat: &str| errs.iter().any(|e| e.contains(pat));
        assert!(has("double-booked by instrs 0 and 1"), "{errs:?}");
        assert!(has("stream 0 driven"), "{errs:?}");
        assert!(has("instr 2") && has("producer 0"), "{errs:?}");
        assert!(has("zero duration") && has("stream 9"), "{errs:?}");
    }
}

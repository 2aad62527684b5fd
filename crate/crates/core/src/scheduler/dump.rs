//! Tab-separated schedule dump, one row per instruction sorted by start cycle.
//!
//! The first seven columns are the Gantt view; the rest carry what is needed
//! to rebuild the schedule exactly. `#` lines hold the node table.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::{Block, NodeInfo, Schedule};
use crate::error::{Error, Result};
use crate::machine::{Dep, DepKind, Instruction, Opcode, Tile, Unit};

pub const HEADER: &str =
    "start_cycle\tduration\tunit_class\tunit_id\topcode\tnode_name\tstream_ids\tlatency\tvector_count\ttensor\ttile\tdeps\tid";

fn list(v: &[u16]) -> String {
    v.iter().map(u16::to_string).collect::<Vec<_>>().join(",")
}

fn or_dash(s: String) -> String {
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

pub fn write_dump(s: &Schedule) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# streams\t{}", s.stream_count);
    let _ = writeln!(out, "# predicted\t{}", s.predicted_total_cycles);
    for n in &s.nodes {
        let _ = writeln!(out, "# node\t{}\t{}\t{}", n.name, n.layer, n.block.name());
    }
    out.push_str(HEADER);
    out.push('\n');
    let mut order: Vec<&Instruction> = s.instructions.iter().collect();
    order.sort_by_key(|i| (i.start, i.id));
    for i in order {
        let streams = format!("{}>{}", list(&i.operand_streams), list(&i.result_streams));
        let tile = i.tile.map_or("-".into(), |t| format!("{}/{}/{}/{}", t.head, t.in_tile, t.out_tile, u8::from(t.emits)));
        let deps = i
            .deps
            .iter()
            .map(|d| format!("{}{}+{}", if d.kind == DepKind::Stream { 's' } else { 'b' }, d.producer, d.hop))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i.start,
            i.duration,
            i.unit.class(),
            i.unit.id(),
            i.opcode.name(),
            s.nodes.get(i.node as usize).map_or("?", |n| n.name.as_str()),
            streams,
            i.latency,
            i.vector_count,
            or_dash(i.tensor.clone()),
            tile,
            or_dash(deps),
            i.id
        );
    }
    out
}

fn bad(line: usize, what: &str) -> Error {
    Error::Format(format!("schedule dump line {line}: {what}"))
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(line, &format!("bad {what} `{s}`")))
}

fn parse_list(s: &str, line: usize) -> Result<Vec<u16>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| num(x, line, "stream id")).collect()
}

pub fn read_dump(text: &str) -> Result<Schedule> {
    let mut stream_count = None;
    let mut predicted = 0;
    let mut nodes = Vec::new();
    let mut index = HashMap::new();
    let mut instructions = Vec::new();
    let mut header = false;
    for (k, raw) in text.lines().enumerate() {
        let ln = k + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if let Some(tag) = cols[0].strip_prefix("# ") {
            match (tag, cols.len()) {
                ("streams", 2) => stream_count = Some(num(cols[1], ln, "stream count")?),
                ("predicted", 2) => predicted = num(cols[1], ln, "cycle count")?,
                ("node", 4) => {
                    let block = match cols[3] {
                        "SA" => Block::SelfAttention,
                        "FF" => Block::FeedForward,
                        "standalone" => Block::Standalone,
                        b => return Err(bad(ln, &format!("unknown block `{b}`"))),
                    };
                    index.insert(cols[1].to_string(), nodes.len() as u32);
                    nodes.push(NodeInfo { name: cols[1].into(), layer: num(cols[2], ln, "layer")?, block });
                }
                _ => return Err(bad(ln, "unknown directive")),
            }
            continue;
        }
        if !header {
            if raw != HEADER {
                return Err(bad(ln, "missing header row"));
            }
            header = true;
            continue;
        }
        if cols.len() != 13 {
            return Err(bad(ln, &format!("expected 13 columns, found {}", cols.len())));
        }
        let unit = Unit::parse(cols[2], num(cols[3], ln, "unit id")?).ok_or_else(|| bad(ln, "unknown unit class"))?;
        let opcode = Opcode::parse(cols[4]).ok_or_else(|| bad(ln, "unknown opcode"))?;
        let node = *index.get(cols[5]).ok_or_else(|| bad(ln, &format!("unknown node `{}`", cols[5])))?;
        let (ops, res) = cols[6].split_once('>').ok_or_else(|| bad(ln, "stream ids need `operands>results`"))?;
        let tile = match cols[10] {
            "-" => None,
            t => {
                let p: Vec<u32> = t.split('/').map(|x| num(x, ln, "tile")).collect::<Result<_>>()?;
                if p.len() != 4 {
                    return Err(bad(ln, "tile needs four fields"));
                }
                Some(Tile { head: p[0], in_tile: p[1], out_tile: p[2], emits: p[3] != 0 })
            }
        };
        let deps = match cols[11] {
            "-" => Vec::new(),
            d => d
                .split(',')
                .map(|x| {
                    let kind = match x.chars().next() {
                        Some('s') => DepKind::Stream,
                        Some('b') => DepKind::Barrier,
                        _ => return Err(bad(ln, "dep kind must be s or b")),
                    };
                    let (p, h) = x[1..].split_once('+').ok_or_else(|| bad(ln, "dep needs producer+hop"))?;
                    Ok(Dep { producer: num(p, ln, "producer")?, kind, hop: num(h, ln, "hop")? })
                })
                .collect::<Result<_>>()?,
        };
        instructions.push(Instruction {
            id: num(cols[12], ln, "id")?,
            unit,
            opcode,
            node,
            operand_streams: parse_list(ops, ln)?,
            result_streams: parse_list(res, ln)?,
            start: num(cols[0], ln, "start")?,
            duration: num(cols[1], ln, "duration")?,
            latency: num(cols[7], ln, "latency")?,
            vector_count: num(cols[8], ln, "vector count")?,
            deps,
            tensor: if cols[9] == "-" { String::new() } else { cols[9].into() },
            tile,
        });
    }
    if !header {
        return Err(Error::Format("schedule dump has no header row".into()));
    }
    instructions.sort_by_key(|i| i.id);
    let stream_count = stream_count.ok_or_else(|| Error::Format("schedule dump lacks the stream count".into()))?;
    Ok(Schedule { instructions, nodes, stream_count, predicted_total_cycles: predicted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(read_dump("").is_err());
        assert!(read_dump("# streams\t4\nnot a header\n").is_err());
        let short = format!("# streams\t4\n{HEADER}\n1\t2\n");
        assert!(matches!(read_dump(&short), Err(Error::Format(m)) if m.contains("13 columns")));
    }
}

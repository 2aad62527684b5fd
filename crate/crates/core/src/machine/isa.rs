use std::fmt;

use super::config::AluOp;

/// A functional unit (or unit port) that one instruction occupies per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Unit {
    /// MXM plane streaming port.
    Mxm(u16),
    /// MXM plane weight-install port.
    Install(u16),
    Alu(u16),
    Sxm(u16),
    MemRead(u16),
    MemWrite(u16),
}

impl Unit {
    pub fn class(self) -> &'static str {
        match self {
            Unit::Mxm(_) => "mxm",
            Unit::Install(_) => "mxm_install",
            Unit::Alu(_) => "alu",
            Unit::Sxm(_) => "sxm",
            Unit::MemRead(_) => "mem_read",
            Unit::MemWrite(_) => "mem_write",
        }
    }

    pub fn id(self) -> u16 {
        match self {
            Unit::Mxm(i) | Unit::Install(i) | Unit::Alu(i) | Unit::Sxm(i) | Unit::MemRead(i) | Unit::MemWrite(i) => i,
        }
    }

    pub fn parse(class: &str, id: u16) -> Option<Unit> {
        Some(match class {
            "mxm" => Unit::Mxm(id),
            "mxm_install" => Unit::Install(id),
            "alu" => Unit::Alu(id),
            "sxm" => Unit::Sxm(id),
            "mem_read" => Unit::MemRead(id),
            "mem_write" => Unit::MemWrite(id),
            _ => return None,
        })
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.class(), self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Read,
    Write,
    InstallWeights,
    MatmulStream,
    Alu(AluOp),
    Reorder,
    Distribute,
}

impl Opcode {
    pub fn name(self) -> String {
        match self {
            Opcode::Read => "read".into(),
            Opcode::Write => "write".into(),
            Opcode::InstallWeights => "install_weights".into(),
            Opcode::MatmulStream => "matmul_stream".into(),
            Opcode::Alu(op) => format!("alu.{}", op.name()),
            Opcode::Reorder => "reorder".into(),
            Opcode::Distribute => "distribute".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Opcode> {
        Some(match s {
            "read" => Opcode::Read,
            "write" => Opcode::Write,
            "install_weights" => Opcode::InstallWeights,
            "matmul_stream" => Opcode::MatmulStream,
            "reorder" => Opcode::Reorder,
            "distribute" => Opcode::Distribute,
            _ => Opcode::Alu(AluOp::from_name(s.strip_prefix("alu.")?)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepKind {
    /// The consumer starts only after the producer's last result arrived.
    Barrier,
    /// The consumer reads the producer's results as they stream past.
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dep {
    pub producer: u32,
    pub kind: DepKind,
    pub hop: u64,
}

/// Weight tile processed by one MXM pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tile {
    pub head: u32,
    pub in_tile: u32,
    pub out_tile: u32,
    /// Accumulators are drained to the result streams at the end of this pass.
    pub emits: bool,
}

/// One cycle-stamped instruction.
///
/// Results leave the unit during `[start + latency, start + latency + duration)`.
/// MXM, SXM and MEM units are occupied for `[start, start + duration)`; ALUs
/// also hold their pipeline registers while the chain drains, so they are
/// occupied until completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub id: u32,
    pub unit: Unit,
    pub opcode: Opcode,
    pub node: u32,
    pub operand_streams: Vec<u16>,
    pub result_streams: Vec<u16>,
    pub start: u64,
    pub duration: u64,
    pub latency: u64,
    pub vector_count: u64,
    pub deps: Vec<Dep>,
    /// Tensor moved by MEM instructions; empty otherwise.
    pub tensor: String,
    pub tile: Option<Tile>,
}

impl Instruction {
    pub fn completion(&self) -> u64 {
        self.start + self.latency + self.duration
    }

    pub fn first_result(&self) -> u64 {
        self.start + self.latency
    }

    /// Units are pipelined: a unit accepts new work once its inputs are consumed.
    pub fn busy_end(&self) -> u64 {
        self.start + self.duration
    }

    /// Checks one dependency against this instruction's timing; `None` when satisfied.
    pub fn dep_violation(&self, dep: &Dep, producer: &Instruction) -> Option<String> {
        match dep.kind {
            DepKind::Barrier => {
                let need = (producer.completion() + dep.hop).saturating_sub(1);
                (self.start < need).then(|| {
                    format!(
                        "instr {} starts at {} before producer {} result arrives at {need}",
                        self.id, self.start, producer.id
                    )
                })
            }
            DepKind::Stream => {
                // The producer's arrival window must lie inside the consumer's window.
                let first = producer.first_result() + dep.hop;
                if self.start > first {
                    return Some(format!(
                        "instr {} starts at {} after streamed results of {} begin arriving at {first}",
                        self.id, self.start, producer.id
                    ));
                }
                let last = producer.completion() + dep.hop;
                (self.start + self.duration < last).then(|| {
                    format!(
                        "instr {} ends at {} before streamed results of {} end at {last}",
                        self.id,
                        self.start + self.duration,
                        producer.id
                    )
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instr(id: u32, unit: Unit, start: u64, duration: u64, latency: u64) -> Instruction {
        Instruction {
            id,
            unit,
            opcode: Opcode::MatmulStream,
            node: 0,
            operand_streams: vec![],
            result_streams: vec![],
            start,
            duration,
            latency,
            vector_count: duration,
            deps: vec![],
            tensor: String::new(),
            tile: None,
        }
    }

    #[test]
    fn names_roundtrip() {
        for op in [Opcode::Read, Opcode::Reorder, Opcode::Alu(AluOp::ClampRound), Opcode::MatmulStream] {
            assert_eq!(Opcode::parse(&op.name()), Some(op));
        }
        assert_eq!(Opcode::parse("alu.div"), None);
        let u = Unit::MemWrite(7);
        assert_eq!(Unit::parse(u.class(), u.id()), Some(u));
    }

    #[test]
    fn units_free_after_last_input() {
        assert_eq!(instr(0, Unit::Alu(0), 10, 5, 3).busy_end(), 15);
        assert_eq!(instr(0, Unit::Mxm(0), 10, 5, 3).busy_end(), 15);
    }

    #[test]
    fn dependency_rules() {
        let p = instr(0, Unit::Mxm(0), 0, 8, 4);
        let dep = Dep { producer: 0, kind: DepKind::Stream, hop: 1 };
        assert!(instr(1, Unit::Alu(0), 5, 8, 1).dep_violation(&dep, &p).is_none());
        assert!(instr(1, Unit::Alu(0), 4, 9, 1).dep_violation(&dep, &p).is_none());
        let err = instr(1, Unit::Alu(0), 4, 8, 1).dep_violation(&dep, &p).unwrap();
        assert!(err.contains("instr 1") && err.contains(" 0 "), "{err}");
        let late = instr(1, Unit::Alu(0), 6, 8, 1).dep_violation(&dep, &p).unwrap();
        assert!(late.contains("after"), "{late}");
        let bar = Dep { kind: DepKind::Barrier, ..dep };
        assert!(instr(1, Unit::Alu(0), 12, 1, 1).dep_violation(&bar, &p).is_none());
        assert!(instr(1, Unit::Alu(0), 11, 1, 1).dep_violation(&bar, &p).is_some());
    }
}

//! Cycle-stepped machine state.
//!
//! Within one cycle events run in a fixed order: completions, node kernels
//! (by node id), instruction issues, then stream claims. A consumer issuing
//! in the cycle its producer completes therefore sees the result.

use std::collections::{BTreeSet, HashMap, HashSet};

use super::kernels;
use crate::error::{Error, Result};
use crate::machine::{ArchConfig, DepKind, Instruction, Opcode, Tile, Unit};
use crate::reference::{Trace, Value};
use crate::scheduler::{ComputeGraph, Op, Schedule, TensorRole};
use crate::tensor::{AccTensor, FpTensor, QuantTensor, Shape};

/// Whether the simulator computes values or only checks timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Functional,
    TimingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Complete,
    NodeDone,
    Start,
    ResultBegin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    cycle: u64,
    phase: Phase,
    id: u32,
}

/// A weight tile held in one of a plane's two buffers.
#[derive(Debug, Clone)]
struct Loaded {
    tile: Tile,
    node: u32,
    ready: u64,
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

#[derive(Debug, Clone, Default)]
struct Plane {
    bufs: [Option<Loaded>; 2],
    /// Cycle until which each buffer feeds a matmul burst.
    in_use: [u64; 2],
    installs: u64,
    passes: u64,
}

/// Wide accumulators of one GEMM node plus its drained int32 output.
#[derive(Debug, Clone)]
struct GemmAcc {
    heads: usize,
    m: usize,
    n: usize,
    matrix: bool,
    scale: f32,
    bias: Option<Vec<i32>>,
    acc: Vec<i64>,
    out: Vec<i32>,
}

impl GemmAcc {
    fn tensor(&self) -> Result<AccTensor> {
        let shape = if self.matrix { Shape::matrix(self.m, self.n)? } else { Shape::new(vec![self.heads, self.m, self.n])? };
        AccTensor::new(self.out.clone(), self.scale, shape)
    }
}

#[derive(Debug, Clone, Default)]
struct WriteLog {
    total: usize,
    done: usize,
    tagged: bool,
    tiles: BTreeSet<u32>,
}

pub struct MachineState<'a> {
    pub cycle: u64,
    schedule: &'a Schedule,
    graph: Option<&'a ComputeGraph>,
    cfg: &'a ArchConfig,
    mode: Mode,
    events: Vec<Event>,
    next: usize,
    unit_busy: HashMap<Unit, (u64, u32)>,
    stream_busy: Vec<(u64, u32)>,
    planes: Vec<Plane>,
    install_buf: HashMap<u32, usize>,
    writes: HashMap<&'a str, WriteLog>,
    initial: HashSet<&'a str>,
    gemms: HashMap<u32, GemmAcc>,
    pub values: Trace,
}

fn hazard(cycle: u64, detail: String) -> Error {
    Error::Hazard { cycle, detail }
}

impl<'a> MachineState<'a> {
    /// Prepares a run. `graph` may be omitted only in timing-only mode.
    pub fn new(
        schedule: &'a Schedule,
        graph: Option<&'a ComputeGraph>,
        cfg: &'a ArchConfig,
        init: Trace,
        mode: Mode,
    ) -> Result<Self> {
        if mode == Mode::Functional && graph.is_none() {
            return Err(Error::Schedule("functional simulation needs the compute graph".into()));
        }
        let mut events = Vec::new();
        for i in &schedule.instructions {
            events.push(Event { cycle: i.start, phase: Phase::Start, id: i.id });
            events.push(Event { cycle: i.completion(), phase: Phase::Complete, id: i.id });
            if !i.result_streams.is_empty() {
                events.push(Event { cycle: i.first_result(), phase: Phase::ResultBegin, id: i.id });
            }
        }
        for (n, w) in schedule.node_windows().into_iter().enumerate() {
            if let Some((_, end)) = w {
                events.push(Event { cycle: end, phase: Phase::NodeDone, id: n as u32 });
            }
        }
        events.sort_unstable();

        let mut writes: HashMap<&str, WriteLog> = HashMap::new();
        for i in schedule.instructions.iter().filter(|i| i.opcode == Opcode::Write) {
            let w = writes.entry(i.tensor.as_str()).or_default();
            w.total += 1;
            w.tagged |= i.tile.is_some();
        }
        let mut initial: HashSet<&str> = HashSet::new();
        match graph {
            Some(g) => {
                for (name, t) in &g.tensors {
                    if t.role != TensorRole::Activation {
                        if mode == Mode::Functional && !init.contains_key(name) {
                            return Err(Error::UninitializedRead { tensor: name.clone(), node: "initial image".into(), cycle: 0 });
                        }
                        initial.insert(name.as_str());
                    }
                }
            }
            None => {
                // Without a graph, anything read but never written is taken as preloaded.
                for i in &schedule.instructions {
                    if i.opcode == Opcode::Read && !writes.contains_key(i.tensor.as_str()) {
                        initial.insert(i.tensor.as_str());
                    }
                }
            }
        }
        Ok(MachineState {
            cycle: 0,
            schedule,
            graph,
            cfg,
            mode,
            events,
            next: 0,
            unit_busy: HashMap::new(),
            stream_busy: vec![(0, u32::MAX); schedule.stream_count],
            planes: vec![Plane::default(); cfg.mxm_plane_count],
            install_buf: HashMap::new(),
            writes,
            initial,
            gemms: HashMap::new(),
            values: if mode == Mode::Functional { init } else { Trace::new() },
        })
    }

    /// True once every event has fired.
    pub fn finished(&self) -> bool {
        self.next >= self.events.len()
    }

    /// Advances one cycle: fires everything scheduled at the current cycle.
    pub fn step(&mut self) -> Result<()> {
        while let Some(&e) = self.events.get(self.next) {
            if e.cycle != self.cycle {
                break;
            }
            self.next += 1;
            match e.phase {
                Phase::Complete => self.complete(e.id)?,
                Phase::NodeDone => self.node_done(e.id)?,
                Phase::Start => self.start(e.id)?,
                Phase::ResultBegin => self.claim_stream(e.id)?,
            }
        }
        self.cycle += 1;
        Ok(())
    }

    fn instr(&self, id: u32) -> &'a Instruction {
        &self.schedule.instructions[id as usize]
    }

    fn node_name(&self, node: u32) -> String {
        self.schedule.nodes.get(node as usize).map_or_else(|| format!("node {node}"), |n| n.name.clone())
    }

    fn start(&mut self, id: u32) -> Result<()> {
        let i = self.instr(id);
        let t = self.cycle;
        if let Some(&(until, other)) = self.unit_busy.get(&i.unit) {
            if until > t {
                return Err(hazard(t, format!("unit {} busy with instr {other} until {until} when instr {id} issues", i.unit)));
            }
        }
        self.unit_busy.insert(i.unit, (i.busy_end(), id));
        for d in &i.deps {
            let p = self.instr(d.producer);
            if let Some(v) = i.dep_violation(d, p) {
                return Err(hazard(t, v));
            }
            if d.kind == DepKind::Stream && !p.result_streams.iter().all(|s| i.operand_streams.contains(s)) {
                return Err(hazard(t, format!("instr {id} does not listen on the streams of producer {}", p.id)));
            }
        }
        match i.opcode {
            Opcode::Read => self.check_initialized(i),
            Opcode::InstallWeights => self.install(i),
            Opcode::MatmulStream => self.matmul(i),
            _ => Ok(()),
        }
    }

    fn claim_stream(&mut self, id: u32) -> Result<()> {
        let i = self.instr(id);
        let all = &self.schedule.instructions;
        for &s in &i.result_streams {
            let slot = self
                .stream_busy
                .get_mut(s as usize)
                .ok_or_else(|| hazard(self.cycle, format!("instr {id} drives missing stream {s}")))?;
            if slot.0 > self.cycle {
                return Err(hazard(
                    self.cycle,
                    format!("stream {s} driven by instr {} ({}) and instr {id} ({})", slot.1, all[slot.1 as usize].unit, i.unit),
                ));
            }
            *slot = (i.completion(), id);
        }
        Ok(())
    }

    fn check_initialized(&self, i: &Instruction) -> Result<()> {
        let name = i.tensor.as_str();
        if self.initial.contains(name) {
            return Ok(());
        }
        let ok = match self.writes.get(name) {
            None => false,
            Some(w) if w.tagged && i.tile.is_some() => w.tiles.contains(&i.tile.expect("checked").in_tile),
            Some(w) => w.done == w.total,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UninitializedRead { tensor: name.to_string(), node: self.node_name(i.node), cycle: self.cycle })
        }
    }

    fn plane(&mut self, unit: Unit) -> Result<&mut Plane> {
        let p = unit.id() as usize;
        let cycle = self.cycle;
        self.planes.get_mut(p).ok_or_else(|| hazard(cycle, format!("no MXM plane {p}")))
    }

    fn install(&mut self, i: &Instruction) -> Result<()> {
        let t = self.cycle;
        let plane = self.plane(i.unit)?;
        let b = (plane.installs % 2) as usize;
        if plane.in_use[b] > t {
            return Err(hazard(t, format!("install instr {} overwrites buffer {b} of {} during a matmul burst", i.id, i.unit)));
        }
        plane.installs += 1;
        plane.bufs[b] = None;
        self.install_buf.insert(i.id, b);
        Ok(())
    }

    fn matmul(&mut self, i: &'a Instruction) -> Result<()> {
        let t = self.cycle;
        let tile = i.tile.ok_or_else(|| hazard(t, format!("matmul instr {} has no tile", i.id)))?;
        let plane = self.plane(i.unit)?;
        let b = (plane.passes % 2) as usize;
        plane.passes += 1;
        plane.in_use[b] = t + i.duration;
        let loaded = match &plane.bufs[b] {
            Some(l) if l.ready <= t && l.node == i.node && l.tile.head == tile.head && l.tile.in_tile == tile.in_tile && l.tile.out_tile == tile.out_tile => {
                l.clone()
            }
            _ => return Err(hazard(t, format!("matmul instr {} on {} finds the wrong weights in buffer {b}", i.id, i.unit))),
        };
        if self.mode == Mode::TimingOnly {
            return Ok(());
        }
        let g = self.graph.expect("functional mode has a graph");
        let node = &g.nodes[i.node as usize];
        let a = match self.values.get(&node.inputs[0]) {
            Some(Value::Quant(a)) => a.clone(),
            _ => return Err(Error::UninitializedRead { tensor: node.inputs[0].clone(), node: node.name.clone(), cycle: t }),
        };
        let matrix = matches!(node.op, Op::Gemm { .. });
        let (heads, m, k) = match *a.shape().dims() {
            [m, k] => (1, m, k),
            [h, m, k] => (h, m, k),
            _ => return Err(Error::ShapeMismatch(format!("{}: activation {}", node.name, a.shape()))),
        };
        if !self.gemms.contains_key(&i.node) {
            let w = match self.values.get(&node.inputs[1]) {
                Some(Value::Quant(w)) => w,
                _ => return Err(Error::UninitializedRead { tensor: node.inputs[1].clone(), node: node.name.clone(), cycle: t }),
            };
            let n = *w.shape().dims().last().expect("rank >= 2");
            let bias = match (node.op, node.inputs.get(2).and_then(|b| self.values.get(b))) {
                (Op::Gemm { bias: true }, Some(Value::Acc(b))) => Some(b.data().to_vec()),
                (Op::Gemm { bias: true }, _) => {
                    return Err(Error::UninitializedRead { tensor: node.inputs[2].clone(), node: node.name.clone(), cycle: t })
                }
                _ => None,
            };
            self.gemms.insert(
                i.node,
                GemmAcc { heads, m, n, matrix, scale: a.scale() * w.scale(), bias, acc: vec![0; heads * m * n], out: vec![0; heads * m * n] },
            );
        }
        let l = self.cfg.lane_width;
        let (r0, c0) = (tile.in_tile as usize * l, tile.out_tile as usize * l);
        let e = tile.head as usize;
        let st = self.gemms.get_mut(&i.node).expect("inserted above");
        let ad = a.data();
        for r in 0..m {
            let arow = &ad[(e * m + r) * k + r0..(e * m + r) * k + r0 + loaded.rows];
            let orow = &mut st.acc[(e * m + r) * st.n + c0..(e * m + r) * st.n + c0 + loaded.cols];
            for (tt, &av) in arow.iter().enumerate() {
                if av == 0 {
                    continue;
                }
                let wrow = &loaded.data[tt * loaded.cols..(tt + 1) * loaded.cols];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += i64::from(av) * i64::from(wv);
                }
            }
        }
        Ok(())
    }

    fn complete(&mut self, id: u32) -> Result<()> {
        let i = self.instr(id);
        match i.opcode {
            Opcode::Write => {
                let w = self.writes.get_mut(i.tensor.as_str()).expect("every write is logged");
                w.done += 1;
                if let Some(tile) = i.tile {
                    w.tiles.insert(tile.out_tile);
                    if self.mode == Mode::Functional {
                        self.gelu_tile(i, tile.out_tile)?;
                    }
                }
            }
            Opcode::InstallWeights => self.load_tile(i)?,
            Opcode::MatmulStream if self.mode == Mode::Functional && i.tile.is_some_and(|t| t.emits) => self.drain(i)?,
            _ => {}
        }
        Ok(())
    }

    fn load_tile(&mut self, i: &Instruction) -> Result<()> {
        let t = self.cycle;
        let b = self.install_buf[&i.id];
        let tile = i.tile.ok_or_else(|| hazard(t, format!("install instr {} has no tile", i.id)))?;
        let (rows, cols, data) = if self.mode == Mode::Functional {
            let w = match self.values.get(&i.tensor) {
                Some(Value::Quant(w)) => w,
                _ => return Err(Error::UninitializedRead { tensor: i.tensor.clone(), node: self.node_name(i.node), cycle: t }),
            };
            let (k, n) = match *w.shape().dims() {
                [k, n] | [_, k, n] => (k, n),
                _ => return Err(Error::ShapeMismatch(format!("weights {}", w.shape()))),
            };
            let l = self.cfg.lane_width;
            let (r0, c0) = (tile.in_tile as usize * l, tile.out_tile as usize * l);
            let (rows, cols) = (l.min(k - r0), l.min(n - c0));
            let base = tile.head as usize * k * n;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                data.extend_from_slice(&w.data()[base + (r0 + r) * n + c0..base + (r0 + r) * n + c0 + cols]);
            }
            (rows, cols, data)
        } else {
            (0, 0, Vec::new())
        };
        let plane = self.plane(i.unit)?;
        plane.bufs[b] = Some(Loaded { tile, node: i.node, ready: t, rows, cols, data });
        Ok(())
    }

    /// Adds the bias and narrows the finished output tile to int32.
    fn drain(&mut self, i: &Instruction) -> Result<()> {
        let tile = i.tile.expect("emitting passes carry tiles");
        let l = self.cfg.lane_width;
        let Some(st) = self.gemms.get_mut(&i.node) else { return Ok(()) };
        let e = tile.head as usize;
        let c0 = tile.out_tile as usize * l;
        let c1 = (c0 + l).min(st.n);
        for r in 0..st.m {
            for c in c0..c1 {
                let idx = (e * st.m + r) * st.n + c;
                let v = st.acc[idx] + st.bias.as_ref().map_or(0, |b| i64::from(b[c]));
                st.out[idx] = i32::try_from(v).map_err(|_| Error::Overflow(idx))?;
            }
        }
        Ok(())
    }

    /// A fused GELU group finished writing column tile `o`; compute it so a
    /// downstream GEMM can consume the tile before the whole node completes.
    fn gelu_tile(&mut self, i: &Instruction, o: u32) -> Result<()> {
        let g = self.graph.expect("functional mode has a graph");
        let node = &g.nodes[i.node as usize];
        let Op::Gelu { scale } = node.op else { return Ok(()) };
        let producer = g.producers()[node.inputs[0].as_str()];
        let acc = match self.gemms.get(&producer) {
            Some(st) => st.tensor()?,
            None => return Err(Error::UninitializedRead { tensor: node.inputs[0].clone(), node: node.name.clone(), cycle: self.cycle }),
        };
        let (rows, n) = match *acc.shape().dims() {
            [r, n] => (r, n),
            _ => return Err(Error::ShapeMismatch(format!("gelu input {}", acc.shape()))),
        };
        let c0 = o as usize * self.cfg.lane_width;
        let c1 = (c0 + self.cfg.lane_width).min(n);
        let parts = kernels::gelu_columns(&acc, n, c0, c1, scale)?;
        for (name, part) in node.outputs.iter().zip(parts) {
            let full = self.values.remove(name);
            let merged = scatter_columns(full, part, rows, n, c0, c1)?;
            self.values.insert(name.clone(), merged);
        }
        Ok(())
    }

    fn node_done(&mut self, n: u32) -> Result<()> {
        if self.mode == Mode::TimingOnly {
            return Ok(());
        }
        let g = self.graph.expect("functional mode has a graph");
        let node = &g.nodes[n as usize];
        if matches!(node.op, Op::Gemm { .. } | Op::BatchedGemm) {
            let st = self.gemms.get(&n).ok_or_else(|| hazard(self.cycle, format!("{} completed without a matmul", node.name)))?;
            self.values.insert(node.outputs[0].clone(), Value::Acc(st.tensor()?));
            return Ok(());
        }
        let mut ins = Vec::with_capacity(node.inputs.len());
        for name in &node.inputs {
            match self.values.get(name) {
                Some(v) => ins.push(v),
                None => return Err(Error::UninitializedRead { tensor: name.clone(), node: node.name.clone(), cycle: self.cycle }),
            }
        }
        let outs = kernels::fire(node.op, &ins)?;
        for (name, v) in node.outputs.iter().zip(outs) {
            self.values.insert(name.clone(), v);
        }
        Ok(())
    }
}

fn scatter_columns(full: Option<Value>, part: Value, rows: usize, n: usize, c0: usize, c1: usize) -> Result<Value> {
    let w = c1 - c0;
    fn put<T: Copy>(dst: &mut [T], src: &[T], rows: usize, n: usize, c0: usize, w: usize) {
        for r in 0..rows {
            dst[r * n + c0..r * n + c0 + w].copy_from_slice(&src[r * w..(r + 1) * w]);
        }
    }
    let shape = Shape::matrix(rows, n)?;
    Ok(match part {
        Value::Fp(p) => {
            let mut d = match full {
                Some(Value::Fp(f)) => f.into_data(),
                _ => vec![0.0; rows * n],
            };
            put(&mut d, p.data(), rows, n, c0, w);
            Value::Fp(FpTensor::new(d, shape)?)
        }
        Value::Quant(p) => {
            let mut d = match full {
                Some(Value::Quant(f)) => f.data().to_vec(),
                _ => vec![0; rows * n],
            };
            put(&mut d, p.data(), rows, n, c0, w);
            Value::Quant(QuantTensor::new(d, p.scale(), shape)?)
        }
        other => return Err(Error::ShapeMismatch(format!("cannot scatter a {} tile", other.kind()))),
    })
}

//! Lowers a compute graph onto the machine at the cycles fixed by [`LayerPlan`].

use std::collections::{BTreeMap, HashMap};

use super::chains::{self, PARALLEL_CHAINS};
use super::graph::{ComputeGraph, TensorRole};
use super::plan::{GemmGeom, LayerPlan, ThreePass};
use crate::error::{Error, Result};
use crate::machine::{AluOp, ArchConfig, Dep, DepKind, Instruction, MemoryMap, Opcode, Region, Tile, Unit};

/// Hop charged between a MEM write's completion and a dependent read.
pub const MEM_HOP: u64 = 1;

/// Scratchpad region and stripe width holding activation `tensor`.
pub fn region_of(tensor: &str) -> Option<(&'static str, u16)> {
    let (scope, short) = tensor.split_once('.')?;
    Some(match (scope, short) {
        ("input", "q") | (_, "out8") => ("x8", 4),
        ("input", "fp") | (_, "out_fp") => ("x_fp", 4),
        (_, "q_heads") => ("q_heads", 1),
        (_, "kt_heads") => ("kt_heads", 1),
        (_, "v_heads") => ("v_heads", 1),
        (_, "ctx8") => ("ctx8", 1),
        (_, "g8") => ("g8", 1),
        (_, "f1_acc") => ("f1_acc", 1),
        (_, "sm_x") => ("sm_x", 4),
        (_, "sm_e") => ("sm_e", 4),
        (_, "probs8") => ("probs8", 4),
        (_, "sa8") => ("sa8", 4),
        (_, "sa_fp") => ("sa_fp", 4),
        (_, "scores_acc") => ("scores_acc", 4),
        (_, "z1" | "z2") => ("z", 4),
        (_, "gz1" | "gz2") => ("gz", 4),
        (_, "o_acc" | "f2_acc") => ("acc", 4),
        _ => return None,
    })
}

pub(crate) struct Emitter<'a> {
    cfg: &'a ArchConfig,
    graph: &'a ComputeGraph,
    ports: HashMap<&'static str, u16>,
    pub instrs: Vec<Instruction>,
    streams: Vec<BTreeMap<u64, u64>>,
    writes: HashMap<String, Vec<(u32, Option<u32>)>>,
    region_bytes: BTreeMap<&'static str, (u64, u16)>,
}

struct Draft {
    unit: Unit,
    opcode: Opcode,
    node: u32,
    start: u64,
    dur: u64,
    lat: u64,
    vectors: u64,
    deps: Vec<Dep>,
    tensor: String,
    tile: Option<Tile>,
    produces: bool,
}

impl<'a> Emitter<'a> {
    pub fn new(cfg: &'a ArchConfig, graph: &'a ComputeGraph) -> Self {
        Emitter {
            cfg,
            graph,
            ports: HashMap::new(),
            instrs: Vec::new(),
            streams: vec![BTreeMap::new(); cfg.stream_count()],
            writes: HashMap::new(),
            region_bytes: BTreeMap::new(),
        }
    }

    /// Records which scratch regions the schedule touches; sized to the largest tensor.
    pub fn note_region(&mut self, tensor: &str) -> Result<()> {
        let (r, stripe) = region_of(tensor).ok_or_else(|| Error::Schedule(format!("no region for `{tensor}`")))?;
        let bytes = self.graph.tensor(tensor)?.bytes();
        let e = self.region_bytes.entry(r).or_insert((0, stripe));
        e.0 = e.0.max(bytes);
        Ok(())
    }

    /// Allocates constants and the touched scratch regions; fixes MEM ports.
    pub fn layout(&mut self, tensors: &[&str]) -> Result<MemoryMap> {
        for t in tensors {
            self.note_region(t)?;
        }
        let mut regions: Vec<Region> = self
            .graph
            .tensors
            .iter()
            .filter(|(_, t)| t.role == TensorRole::Constant)
            .map(|(n, t)| Region::constant(n.clone(), t.bytes()))
            .collect();
        regions.extend(self.region_bytes.iter().map(|(&n, &(b, s))| Region::scratch(n, b, s)));
        let map = crate::machine::alloc_memory(&regions, self.cfg)?;
        for &r in self.region_bytes.keys() {
            self.ports.insert(r, map.get(r).expect("allocated").slice);
        }
        Ok(map)
    }

    fn port(&self, tensor: &str, lane: u16) -> Result<u16> {
        let (r, _) = region_of(tensor).ok_or_else(|| Error::Schedule(format!("no region for `{tensor}`")))?;
        self.ports
            .get(r)
            .map(|&s| s + lane)
            .ok_or_else(|| Error::Schedule(format!("region `{r}` was not laid out")))
    }

    pub fn nid(&self, layer: usize, short: &str) -> Result<u32> {
        nid(self.graph, layer, short)
    }

    fn alloc_stream(&mut self, lo: u64, hi: u64) -> Result<u16> {
        for (id, busy) in self.streams.iter_mut().enumerate() {
            let clash = busy.range(..hi).next_back().is_some_and(|(_, &end)| end > lo);
            if !clash {
                busy.insert(lo, hi);
                return Ok(id as u16);
            }
        }
        Err(Error::Schedule(format!("all {} streams busy during cycles {lo}..{hi}", self.streams.len())))
    }

    fn push(&mut self, s: Draft) -> Result<u32> {
        let id = self.instrs.len() as u32;
        let operand_streams = s
            .deps
            .iter()
            .filter(|d| d.kind == DepKind::Stream)
            .flat_map(|d| self.instrs[d.producer as usize].result_streams.clone())
            .collect();
        let result_streams = if s.produces {
            vec![self.alloc_stream(s.start + s.lat, s.start + s.lat + s.dur)?]
        } else {
            Vec::new()
        };
        self.instrs.push(Instruction {
            id,
            unit: s.unit,
            opcode: s.opcode,
            node: s.node,
            operand_streams,
            result_streams,
            start: s.start,
            duration: s.dur,
            latency: s.lat,
            vector_count: s.vectors,
            deps: s.deps,
            tensor: s.tensor,
            tile: s.tile,
        });
        Ok(id)
    }

    fn hop(&self) -> u64 {
        self.cfg.stream_hop_latency_cycles
    }

    fn stream(&self, p: u32) -> Dep {
        Dep { producer: p, kind: DepKind::Stream, hop: self.hop() }
    }

    fn barrier(&self, p: u32) -> Dep {
        Dep { producer: p, kind: DepKind::Barrier, hop: self.hop() }
    }

    fn write_deps(&self, tensor: &str, need: Option<u32>) -> Vec<Dep> {
        let Some(ws) = self.writes.get(tensor) else { return Vec::new() };
        let tiled = need.is_some() && ws.iter().all(|(_, t)| t.is_some());
        ws.iter()
            .filter(|(_, t)| !tiled || *t == need)
            .map(|&(p, _)| Dep { producer: p, kind: DepKind::Barrier, hop: MEM_HOP })
            .collect()
    }

    /// MEM read of `tensor` through stripe `lane`; results stream out after the read latency.
    #[allow(clippy::too_many_arguments)]
    fn read(&mut self, node: u32, tensor: &str, lane: u16, start: u64, dur: u64, tile: Option<Tile>, extra: Vec<Dep>) -> Result<u32> {
        let slice = self.port(tensor, lane)?;
        let mut deps = self.write_deps(tensor, tile.map(|t| t.in_tile));
        deps.extend(extra);
        self.push(Draft {
            unit: Unit::MemRead(slice),
            opcode: Opcode::Read,
            node,
            start,
            dur,
            lat: self.cfg.mem_read_latency_cycles,
            vectors: dur,
            deps,
            tensor: tensor.to_string(),
            tile,
            produces: true,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn write(&mut self, node: u32, tensor: &str, lane: u16, start: u64, dur: u64, deps: Vec<Dep>, part: Option<u32>) -> Result<u32> {
        let slice = self.port(tensor, lane)?;
        let id = self.push(Draft {
            unit: Unit::MemWrite(slice),
            opcode: Opcode::Write,
            node,
            start,
            dur,
            lat: 0,
            vectors: dur,
            deps,
            tensor: tensor.to_string(),
            tile: part.map(|o| Tile { head: 0, in_tile: 0, out_tile: o, emits: false }),
            produces: false,
        })?;
        self.writes.entry(tensor.to_string()).or_default().push((id, part));
        Ok(id)
    }

    /// One instruction per stage, all sharing the window; returns the last stage.
    fn chain(&mut self, nodes: &[u32], ops: &[AluOp], first_alu: u16, start: u64, dur: u64, deps: Vec<Dep>) -> Result<u32> {
        let alloc = chains::AluChain::new(ops, first_alu, self.cfg)?;
        let lat = alloc.latency(self.cfg);
        let mut last = 0;
        for (k, (&alu, &op)) in alloc.alus.iter().zip(&alloc.ops).enumerate() {
            last = self.push(Draft {
                unit: Unit::Alu(alu),
                opcode: Opcode::Alu(op),
                node: nodes[k.min(nodes.len() - 1)],
                start,
                dur,
                lat,
                vectors: dur,
                deps: if k == 0 { deps.clone() } else { Vec::new() },
                tensor: String::new(),
                tile: None,
                produces: k + 1 == ops.len(),
            })?;
        }
        Ok(last)
    }

    /// Emits one plane's passes. `act(e, i)` names the activation read for
    /// head `e`, input tile `i`; `weights` is either a constant or an
    /// activation tensor read through MEM before each install. Returns the
    /// matmul ids of the emitting passes in pass order with their `(head, out)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        &mut self,
        node: u32,
        plane: u16,
        geom: &GemmGeom,
        s: u64,
        act: &str,
        weights: &str,
        weights_in_mem: bool,
        shared_reads: &mut Option<Vec<u32>>,
    ) -> Result<Vec<(u32, u64, u64)>> {
        let (h, m, inst) = (self.hop(), self.cfg.mem_read_latency_cycles, self.cfg.mxm_install_latency_cycles);
        let mut emits = Vec::new();
        let mut reads = Vec::new();
        let mut idx = 0usize;
        for e in 0..geom.heads {
            for o in 0..geom.nout {
                for i in 0..geom.nin {
                    let p = geom.pass_index(e, o, i);
                    let ps = geom.pass_start(s, p);
                    let tile = Tile { head: e as u32, in_tile: i as u32, out_tile: o as u32, emits: i + 1 == geom.nin };
                    let install_deps = if weights_in_mem {
                        let r = self.read(node, weights, 0, ps - inst - m - h, inst, Some(tile), Vec::new())?;
                        vec![self.stream(r)]
                    } else {
                        Vec::new()
                    };
                    let inst_id = self.push(Draft {
                        unit: Unit::Install(plane),
                        opcode: Opcode::InstallWeights,
                        node,
                        start: ps - inst,
                        dur: inst,
                        lat: 0,
                        vectors: self.cfg.mxm_plane_rows as u64,
                        deps: install_deps,
                        tensor: weights.to_string(),
                        tile: Some(tile),
                        produces: false,
                    })?;
                    let read = match shared_reads.as_ref().and_then(|v| v.get(idx).copied()) {
                        Some(r) => r,
                        None => self.read(node, act, 0, ps - m - h, geom.m, Some(tile), Vec::new())?,
                    };
                    reads.push(read);
                    idx += 1;
                    let mm = self.push(Draft {
                        unit: Unit::Mxm(plane),
                        opcode: Opcode::MatmulStream,
                        node,
                        start: ps,
                        dur: geom.m,
                        lat: geom.depth,
                        vectors: geom.m,
                        deps: vec![self.stream(read), Dep { producer: inst_id, kind: DepKind::Barrier, hop: MEM_HOP }],
                        tensor: String::new(),
                        tile: Some(tile),
                        produces: tile.emits,
                    })?;
                    if tile.emits {
                        emits.push((mm, e, o));
                    }
                }
            }
        }
        if shared_reads.is_none() {
            *shared_reads = Some(reads);
        }
        Ok(emits)
    }

    /// Quantize chain, SXM reorder and MEM write behind every emitting pass.
    #[allow(clippy::too_many_arguments)]
    fn requant_groups(
        &mut self,
        emits: &[(u32, u64, u64)],
        geom: &GemmGeom,
        s: u64,
        quant: u32,
        reorder: u32,
        alu: u16,
        sxm: u16,
        out: &str,
    ) -> Result<()> {
        let h = self.hop();
        let lat_q = chains::latency(&chains::REQUANT, self.cfg);
        for &(mm, e, o) in emits {
            let t = geom.emit_start(s, e, o);
            let c = self.chain(&[quant], &chains::REQUANT, alu, t + h, geom.m, vec![self.stream(mm)])?;
            let x = self.push(Draft {
                unit: Unit::Sxm(sxm),
                opcode: Opcode::Reorder,
                node: reorder,
                start: t + 2 * h + lat_q,
                dur: geom.m,
                lat: self.cfg.sxm_reorder_latency_cycles,
                vectors: geom.m,
                deps: vec![self.stream(c)],
                tensor: String::new(),
                tile: None,
                produces: true,
            })?;
            let ws = t + 3 * h + lat_q + self.cfg.sxm_reorder_latency_cycles;
            self.write(reorder, out, 0, ws, geom.m, vec![self.stream(x)], None)?;
        }
        Ok(())
    }

    /// Writes every emitting pass's raw accumulators (serialized baselines).
    fn spill(&mut self, emits: &[(u32, u64, u64)], geom: &GemmGeom, s: u64, node: u32, out: &str) -> Result<()> {
        for &(mm, e, o) in emits {
            let t = geom.emit_start(s, e, o) + self.hop();
            self.write(node, out, 0, t, geom.m, vec![self.stream(mm)], None)?;
        }
        Ok(())
    }

    /// A three-pass reduction (layer normalization or softmax).
    ///
    /// `pass1_in` are the MEM inputs of an unfused pass one, `stream_in` the
    /// producers feeding a fused one (plus per-tile residual reads described
    /// by `residual`). `nodes[k]` owns the instructions of pass `k`; pass
    /// one's stages may be split across nodes through `p1_nodes`.
    #[allow(clippy::too_many_arguments)]
    fn three_pass(
        &mut self,
        t: &ThreePass,
        recipes: [&[AluOp]; 3],
        steps: [&[AluOp]; 2],
        p1_nodes: &[u32],
        nodes: [u32; 3],
        pass1_in: &[&str],
        stream_in: &[u32],
        residual: Option<(&str, &[(u64, u64)])>,
        t1: &str,
        t2: &str,
        out: &[&str],
    ) -> Result<()> {
        let (h, m) = (self.hop(), self.cfg.mem_read_latency_cycles);
        let n_chains = PARALLEL_CHAINS as u16;
        let width = |r: &[AluOp]| r.len() as u16;
        // Stage nodes run first to last; the pass-one tensor belongs to the
        // second-to-last (the residual add for LN, the only node for softmax).
        let z_node = p1_nodes[p1_nodes.len().saturating_sub(2)];

        // Pass one.
        let mut lasts = Vec::new();
        if t.fused {
            let mut deps: Vec<Dep> = stream_in.iter().map(|&p| self.stream(p)).collect();
            if let Some((res, windows)) = residual {
                for &(start, dur) in windows {
                    let r = self.read(z_node, res, 0, start - m - h, dur, None, Vec::new())?;
                    deps.push(self.stream(r));
                }
            }
            for c in 0..n_chains {
                lasts.push(self.chain(p1_nodes, recipes[0], c * width(recipes[0]), t.p[0], t.dur[0], deps.clone())?);
            }
            let deps = lasts.iter().map(|&l| self.stream(l)).collect();
            self.write(z_node, t1, 0, t.p[0] + recipes_lat(self.cfg, recipes[0]) + h, t.dur[0], deps, None)?;
        } else {
            for c in 0..n_chains {
                let mut deps = Vec::new();
                for (k, src) in pass1_in.iter().enumerate() {
                    let r = self.read(if k == 0 { p1_nodes[0] } else { z_node }, src, c, t.read1, t.dur[0], None, Vec::new())?;
                    deps.push(self.stream(r));
                }
                let last = self.chain(p1_nodes, recipes[0], c * width(recipes[0]), t.p[0], t.dur[0], deps)?;
                lasts.push(last);
                let ws = t.p[0] + recipes_lat(self.cfg, recipes[0]) + h;
                self.write(z_node, t1, c, ws, t.dur[0], vec![self.stream(last)], None)?;
            }
        }
        let bar: Vec<Dep> = lasts.iter().map(|&l| self.barrier(l)).collect();
        let step_a = self.chain(&[nodes[0]], steps[0], 0, t.step_a, 1, bar)?;

        // Pass two reads pass one's tensor, pass three reads pass two's.
        let mut step = step_a;
        for (k, (src, dst)) in [(t1, t2)].into_iter().chain([(t2, "")]).enumerate() {
            let pass = k + 1;
            let node = nodes[pass];
            let recipe = recipes[pass];
            let mut lasts = Vec::new();
            for c in 0..n_chains {
                let r = self.read(node, src, c, t.p[pass] - m - h, t.dur[pass], None, Vec::new())?;
                let deps = vec![self.stream(r), self.barrier(step)];
                let last = self.chain(&[node], recipe, c * width(recipe), t.p[pass], t.dur[pass], deps)?;
                lasts.push(last);
                let ws = t.p[pass] + recipes_lat(self.cfg, recipe) + h;
                let targets: Vec<&str> = if pass == 1 { vec![dst] } else { out.to_vec() };
                for tgt in targets {
                    self.write(node, tgt, c, ws, t.dur[pass], vec![self.stream(last)], None)?;
                }
            }
            if pass == 1 {
                let bar: Vec<Dep> = lasts.iter().map(|&l| self.barrier(l)).collect();
                // The reciprocal / rstd step belongs to the pass that consumes it
                // for softmax, and to the pass producing rstd for LN.
                step = self.chain(&[nodes[1 + (steps[1].last() == Some(&AluOp::Recip)) as usize]], steps[1], 0, t.step_b, 1, bar)?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<Instruction> {
        self.instrs
    }
}

fn nid(g: &ComputeGraph, layer: usize, short: &str) -> Result<u32> {
    g.node(layer, short)
        .map(|n| n.id)
        .ok_or_else(|| Error::Schedule(format!("graph has no node layer{layer}.{short}")))
}

fn recipes_lat(cfg: &ArchConfig, ops: &[AluOp]) -> u64 {
    chains::latency(ops, cfg)
}

/// Emits layer `l` offset by `base` cycles.
pub(crate) fn emit_layer(em: &mut Emitter, plan: &LayerPlan, l: usize, base: u64) -> Result<()> {
    let h = plan.lat.hop;
    let graph = em.graph;
    let n = |short: &str| nid(graph, l, short);
    let t = |short: &str| format!("layer{l}.{short}");
    let (x8, xfp) = if l == 0 {
        ("input.q".to_string(), "input.fp".to_string())
    } else {
        (format!("layer{}.out8", l - 1), format!("layer{}.out_fp", l - 1))
    };
    let g = plan.qkvo;
    let opts = plan.opts;

    // Q and K in lockstep on planes 0 and 1, sharing the activation reads.
    let s_q = base + plan.s_q;
    let mut shared = None;
    let q_emits = em.gemm(n("q_proj")?, 0, &g, s_q, &x8, &t("wq"), false, &mut shared)?;
    let k_emits = em.gemm(n("k_proj")?, 1, &g, s_q, &x8, &t("wk"), false, &mut shared)?;
    em.requant_groups(&q_emits, &g, s_q, n("q_quant")?, n("q_split")?, 0, 0, &t("q_heads"))?;
    em.requant_groups(&k_emits, &g, s_q, n("k_quant")?, n("k_split")?, 3, 1, &t("kt_heads"))?;

    // Scores on plane 3 with K^T installed per head, softmax behind it.
    let s_sc = base + plan.s_scores;
    let sc = plan.scores;
    let sc_emits = em.gemm(n("scores")?, 3, &sc, s_sc, &t("q_heads"), &t("kt_heads"), true, &mut None)?;
    let sm = shift(&plan.softmax, base);
    if opts.softmax {
        let ids: Vec<u32> = sc_emits.iter().map(|e| e.0).collect();
        em.three_pass(&sm, [&chains::SM_PASS1, &chains::SM_PASS2, &chains::SM_PASS3], [&chains::SM_MAX_STEP, &chains::SM_RECIP_STEP],
            &[n("softmax1")?], [n("softmax1")?, n("softmax2")?, n("softmax3")?], &[], &ids, None,
            &t("sm_x"), &t("sm_e"), &[&t("probs8")])?;
    } else {
        em.spill(&sc_emits, &sc, s_sc, n("scores")?, &t("scores_acc"))?;
    }

    // V on plane 2: alongside the scores GEMM when fused, after softmax otherwise.
    let emit_v = |em: &mut Emitter| -> Result<()> {
        let s_v = base + plan.s_v;
        let v_emits = em.gemm(n("v_proj")?, 2, &g, s_v, &x8, &t("wv"), false, &mut None)?;
        em.requant_groups(&v_emits, &g, s_v, n("v_quant")?, n("v_split")?, 13, 0, &t("v_heads"))
    };
    if opts.softmax {
        emit_v(em)?;
    } else {
        em.three_pass(&sm, [&chains::SM_PASS1, &chains::SM_PASS2, &chains::SM_PASS3], [&chains::SM_MAX_STEP, &chains::SM_RECIP_STEP],
            &[n("softmax1")?], [n("softmax1")?, n("softmax2")?, n("softmax3")?], &[&t("scores_acc")], &[], None,
            &t("sm_x"), &t("sm_e"), &[&t("probs8")])?;
        emit_v(em)?;
    }

    // Context on plane 0 with V installed per head, then the head concat.
    let s_ctx = base + plan.s_ctx;
    let cx = plan.context;
    let cx_emits = em.gemm(n("context")?, 0, &cx, s_ctx, &t("probs8"), &t("v_heads"), true, &mut None)?;
    em.requant_groups(&cx_emits, &cx, s_ctx, n("ctx_quant")?, n("ctx_concat")?, 0, 1, &t("ctx8"))?;

    // Output projection on plane 1 and the first add & norm.
    let s_o = base + plan.s_o;
    let o_emits = em.gemm(n("o_proj")?, 1, &g, s_o, &t("ctx8"), &t("wo"), false, &mut None)?;
    add_norm(em, plan, l, "1", &o_emits, &g, s_o, &t("o_acc"), &xfp, &shift(&plan.ln1, base), opts.ln_pass1)?;

    // Feed-forward: FF1 on plane 2, GELU, FF2 on plane 3.
    let s_f1 = base + plan.s_ff1;
    let f1 = plan.ff1;
    let gelu = n("gelu")?;
    let f1_emits = em.gemm(n("ff1")?, 2, &f1, s_f1, &t("sa8"), &t("w1"), false, &mut None)?;
    let lat_g = plan.lat.gelu;
    match plan.gelu_pass {
        None => {
            for &(mm, _, o) in &f1_emits {
                let e = f1.emit_start(s_f1, 0, o);
                let c = em.chain(&[gelu], &chains::GELU_CHAIN, 0, e + h, f1.m, vec![em.stream(mm)])?;
                em.write(gelu, &t("g8"), 0, e + 2 * h + lat_g, f1.m, vec![em.stream(c)], Some(o as u32))?;
            }
        }
        Some((ready, chain, vectors)) => {
            em.spill(&f1_emits, &f1, s_f1, n("ff1")?, &t("f1_acc"))?;
            let r = em.read(gelu, &t("f1_acc"), 0, base + ready, vectors, None, Vec::new())?;
            let c = em.chain(&[gelu], &chains::GELU_CHAIN, 0, base + chain, vectors, vec![em.stream(r)])?;
            em.write(gelu, &t("g8"), 0, base + chain + lat_g + h, vectors, vec![em.stream(c)], None)?;
        }
    }
    let s_f2 = base + plan.s_ff2;
    let f2 = plan.ff2;
    let f2_emits = em.gemm(n("ff2")?, 3, &f2, s_f2, &t("g8"), &t("w2"), false, &mut None)?;
    add_norm(em, plan, l, "2", &f2_emits, &f2, s_f2, &t("f2_acc"), &t("sa_fp"), &shift(&plan.ln2, base), opts.ln_pass1)
}

fn shift(t: &ThreePass, base: u64) -> ThreePass {
    ThreePass {
        read1: t.read1 + base,
        p: t.p.map(|p| p + base),
        step_a: t.step_a + base,
        step_b: t.step_b + base,
        end: t.end + base,
        ..*t
    }
}

/// Dequantize, residual add and layer normalization behind a GEMM.
#[allow(clippy::too_many_arguments)]
pub(crate) fn add_norm(
    em: &mut Emitter,
    plan: &LayerPlan,
    l: usize,
    i: &str,
    emits: &[(u32, u64, u64)],
    geom: &GemmGeom,
    s: u64,
    acc: &str,
    residual: &str,
    ln: &ThreePass,
    fused: bool,
) -> Result<()> {
    let _ = plan;
    let (deq, res, fp, q8) = if i == "1" { ("o_deq", "res1", "sa_fp", "sa8") } else { ("f2_deq", "res2", "out_fp", "out8") };
    let graph = em.graph;
    let n = |short: &str| nid(graph, l, short);
    let t = |short: &str| format!("layer{l}.{short}");
    let p1_nodes = [n(deq)?, n(deq)?, n(res)?, n(&format!("ln{i}_p1"))?];
    let nodes = [n(&format!("ln{i}_p1"))?, n(&format!("ln{i}_p2"))?, n(&format!("ln{i}_p3"))?];
    let (fp_t, q_t) = (t(fp), t(q8));
    if fused {
        let ids: Vec<u32> = emits.iter().map(|e| e.0).collect();
        let h = em.hop();
        let windows: Vec<(u64, u64)> = emits.iter().map(|&(_, e, o)| (geom.emit_start(s, e, o) + h, geom.m)).collect();
        em.three_pass(ln, [&chains::LN_PASS1, &chains::LN_PASS2, &chains::LN_PASS3], [&chains::LN_MEAN_STEP, &chains::LN_RSTD_STEP],
            &p1_nodes, nodes, &[], &ids, Some((residual, &windows)), &t(&format!("z{i}")), &t(&format!("gz{i}")), &[&fp_t, &q_t])
    } else {
        em.spill(emits, geom, s, em.nid(l, if i == "1" { "o_proj" } else { "ff2" })?, acc)?;
        em.three_pass(ln, [&chains::LN_PASS1, &chains::LN_PASS2, &chains::LN_PASS3], [&chains::LN_MEAN_STEP, &chains::LN_RSTD_STEP],
            &p1_nodes, nodes, &[acc, residual], &[], None, &t(&format!("z{i}")), &t(&format!("gz{i}")), &[&fp_t, &q_t])
    }
}

/// Standalone GEMM starting its first pass at `s`; the result is spilled to MEM.
pub(crate) fn emit_gemm(em: &mut Emitter, geom: &GemmGeom, s: u64) -> Result<()> {
    let node = em.nid(0, "gemm")?;
    let emits = em.gemm(node, 0, geom, s, "input.q", "layer0.wq", false, &mut None)?;
    em.spill(&emits, geom, s, node, "layer0.o_acc")
}

/// Standalone add & norm: both inputs already sit in MEM at cycle 0.
pub(crate) fn emit_layernorm(em: &mut Emitter, t: &ThreePass) -> Result<()> {
    let graph = em.graph;
    let n = |short: &str| nid(graph, 0, short);
    let p1_nodes = [n("o_deq")?, n("o_deq")?, n("res1")?, n("ln1_p1")?];
    let nodes = [n("ln1_p1")?, n("ln1_p2")?, n("ln1_p3")?];
    em.three_pass(t, [&chains::LN_PASS1, &chains::LN_PASS2, &chains::LN_PASS3], [&chains::LN_MEAN_STEP, &chains::LN_RSTD_STEP],
        &p1_nodes, nodes, &["layer0.o_acc", "input.fp"], &[], None, "layer0.z1", "layer0.gz1", &["layer0.sa_fp", "layer0.sa8"])
}

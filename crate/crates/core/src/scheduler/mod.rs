//! Static scheduling of encoder graphs onto the machine model.

pub mod chains;
pub mod dump;
mod emit;
pub mod graph;
pub mod plan;
pub mod predict;
pub mod validate;

pub use dump::{read_dump, write_dump};
pub use emit::{region_of, MEM_HOP};
pub use graph::{
    build_encoder_graph, build_gemm_graph, build_graph, build_layernorm_graph, graph_for_model, graph_for_params, Block, ComputeGraph, LayerConsts,
    Node, NodeKind, Op, TensorInfo, TensorRole,
};
pub use plan::{gemm_cycles, layernorm_constant, layernorm_cycles, FusionOptions, LayerPlan};
pub use predict::{predict_cycles, Prediction};
pub use validate::validate_schedule;

use crate::error::{Error, Result};
use crate::machine::{validate_config, ArchConfig, Instruction, MemoryMap, Region};
use emit::Emitter;
use plan::{per_chain, GemmGeom, Lat, Pass1Source, ThreePass};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    pub name: String,
    pub layer: u32,
    pub block: Block,
}

/// A fully timed instruction list. `instructions[i].id == i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub instructions: Vec<Instruction>,
    pub nodes: Vec<NodeInfo>,
    pub stream_count: usize,
    pub predicted_total_cycles: u64,
}

impl Schedule {
    /// Completion of the last instruction.
    pub fn total_cycles(&self) -> u64 {
        self.instructions.iter().map(Instruction::completion).max().unwrap_or(0)
    }

    /// `(first start, last completion)` of every node that has instructions.
    pub fn node_windows(&self) -> Vec<Option<(u64, u64)>> {
        let mut w: Vec<Option<(u64, u64)>> = vec![None; self.nodes.len()];
        for i in &self.instructions {
            let e = &mut w[i.node as usize];
            *e = Some(match *e {
                None => (i.start, i.completion()),
                Some((a, b)) => (a.min(i.start), b.max(i.completion())),
            });
        }
        w
    }

    /// `(first start, last completion)` over the instructions of layer `l`.
    pub fn layer_window(&self, l: u32) -> Option<(u64, u64)> {
        self.instructions
            .iter()
            .filter(|i| self.nodes[i.node as usize].layer == l)
            .fold(None, |acc, i| match acc {
                None => Some((i.start, i.completion())),
                Some((a, b)) => Some((a.min(i.start), b.max(i.completion()))),
            })
    }
}

/// A schedule with its memory layout and the plan it was emitted from.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub schedule: Schedule,
    pub memory: MemoryMap,
    pub plan: LayerPlan,
}

/// Rejects machines the encoder mapping cannot run on.
fn check_machine(cfg: &ArchConfig) -> Result<()> {
    let problems = validate_config(cfg);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let need = [
        (cfg.vxm_alu_count, chains::REQUIRED_ALUS, "VXM ALUs"),
        (cfg.mxm_plane_count, 4, "MXM planes"),
        (cfg.sxm_port_count, 2, "SXM ports"),
        (cfg.mem_slice_count, 4, "MEM slices"),
    ];
    for (have, want, what) in need {
        if have < want {
            return Err(Error::Schedule(format!("the encoder mapping needs {want} {what}, the machine has {have}")));
        }
    }
    Ok(())
}

fn node_infos(g: &ComputeGraph) -> Vec<NodeInfo> {
    g.nodes.iter().map(|n| NodeInfo { name: n.name.clone(), layer: n.layer, block: n.block }).collect()
}

fn finish(em: Emitter, g: &ComputeGraph, cfg: &ArchConfig, mut memory: MemoryMap, plan: LayerPlan, predicted: u64) -> Result<Compiled> {
    let instructions = em.finish();
    memory.alloc(&Region::instructions("instructions", instructions.len() as u64 * cfg.instruction_bytes))?;
    let schedule = Schedule { instructions, nodes: node_infos(g), stream_count: cfg.stream_count(), predicted_total_cycles: predicted };
    if let Err(c) = validate_schedule(&schedule) {
        return Err(Error::Conflicts(c));
    }
    Ok(Compiled { schedule, memory, plan })
}

/// Schedules every layer of an encoder graph; layer `l` starts `l` periods in.
pub fn schedule_encoder(g: &ComputeGraph, cfg: &ArchConfig, opts: FusionOptions) -> Result<Compiled> {
    check_machine(cfg)?;
    g.validate()?;
    let plan = LayerPlan::new(&g.dims, cfg, opts);
    let mut em = Emitter::new(cfg, g);
    let mut scratch = vec!["input.q", "input.fp"];
    let per_layer = ["q_heads", "kt_heads", "v_heads", "ctx8", "g8", "sm_x", "sm_e", "probs8", "sa8", "sa_fp", "z1", "z2", "gz1", "gz2", "out8", "out_fp"];
    let mut extra = Vec::new();
    if !opts.softmax {
        extra.push("scores_acc");
    }
    if !opts.ln_pass1 {
        extra.extend(["o_acc", "f2_acc"]);
    }
    if !opts.gelu {
        extra.push("f1_acc");
    }
    let names: Vec<String> = (0..g.layers)
        .flat_map(|l| per_layer.iter().chain(&extra).map(move |s| format!("layer{l}.{s}")))
        .collect();
    scratch.extend(names.iter().map(String::as_str));
    let memory = em.layout(&scratch)?;
    for l in 0..g.layers {
        emit::emit_layer(&mut em, &plan, l, l as u64 * plan.period)?;
    }
    let predicted = plan.stack_cycles(g.layers);
    finish(em, g, cfg, memory, plan, predicted)
}

/// Schedules a standalone layer normalization over `j` rows of `k` features.
pub fn schedule_layernorm(g: &ComputeGraph, cfg: &ArchConfig) -> Result<Compiled> {
    check_machine(cfg)?;
    let (k, j) = (g.dims.d_model, g.dims.seq_len);
    if g.node(0, "ln1_p3").is_none() || g.layers != 1 || g.nodes.len() != 5 {
        return Err(Error::Schedule("expected a standalone layer-norm graph".into()));
    }
    let plan = LayerPlan::new(&g.dims, cfg, FusionOptions::serialized());
    let lat = Lat::new(cfg);
    let n4 = per_chain((j * k.div_ceil(cfg.lane_width)) as u64);
    let t = ThreePass::layernorm(&lat, n4, Pass1Source::Mem { ready: 0 });
    let mut em = Emitter::new(cfg, g);
    let memory = em.layout(&["layer0.o_acc", "input.fp", "layer0.z1", "layer0.gz1", "layer0.sa_fp", "layer0.sa8"])?;
    emit::emit_layernorm(&mut em, &t)?;
    finish(em, g, cfg, memory, plan, layernorm_cycles(k, j, cfg))
}

/// Schedules a standalone GEMM graph on plane 0.
pub fn schedule_gemm(g: &ComputeGraph, cfg: &ArchConfig) -> Result<Compiled> {
    check_machine(cfg)?;
    if g.node(0, "gemm").is_none() || g.nodes.len() != 1 {
        return Err(Error::Schedule("expected a standalone GEMM graph".into()));
    }
    let (m, k, n) = (g.dims.seq_len, g.dims.d_model, g.dims.d_ff);
    let geom = GemmGeom::new(1, m, k, n, cfg);
    let lat = Lat::new(cfg);
    let s = lat.install.max(lat.mem + lat.hop);
    let mut em = Emitter::new(cfg, g);
    let memory = em.layout(&["input.q", "layer0.o_acc"])?;
    emit::emit_gemm(&mut em, &geom, s)?;
    let predicted = gemm_cycles(m, k, n, cfg);
    let plan = LayerPlan::new(&g.dims, cfg, FusionOptions::serialized());
    finish(em, g, cfg, memory, plan, predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::ModelDims;

    fn check(dims: ModelDims, layers: usize, cfg: &ArchConfig, opts: FusionOptions) -> Compiled {
        let g = build_encoder_graph(dims, layers).unwrap();
        let c = schedule_encoder(&g, cfg, opts).unwrap_or_else(|e| panic!("{dims:?} {opts:?}: {e}"));
        assert_eq!(c.schedule.total_cycles(), c.schedule.predicted_total_cycles, "{dims:?} {opts:?}");
        assert_eq!(predict_cycles(&g, cfg, opts).total_cycles, c.schedule.total_cycles());
        c
    }

    #[test]
    fn tiny_schedules_and_matches_prediction() {
        for opts in [FusionOptions::default(), FusionOptions::serialized()] {
            check(ModelDims::tiny(), 1, &ArchConfig::tiny(), opts);
            check(ModelDims::tiny(), 3, &ArchConfig::tiny(), opts);
        }
    }

    #[test]
    fn bert_base_layer_is_conflict_free() {
        let c = check(ModelDims::bert_base(), 1, &ArchConfig::default(), FusionOptions::default());
        assert_eq!(c.schedule.layer_window(0), Some((0, c.plan.end)));
    }

    #[test]
    fn every_node_gets_instructions() {
        let c = check(ModelDims::tiny(), 2, &ArchConfig::tiny(), FusionOptions::default());
        let w = c.schedule.node_windows();
        for (n, w) in c.schedule.nodes.iter().zip(&w) {
            assert!(w.is_some(), "{} has no instructions", n.name);
        }
    }

    #[test]
    fn standalone_layernorm_matches_formula() {
        let cfg = ArchConfig::default();
        for (k, j) in [(768, 128), (320, 4), (1000, 9)] {
            let g = build_layernorm_graph(k, j, 1.0, 1e-5).unwrap();
            let c = schedule_layernorm(&g, &cfg).unwrap();
            assert_eq!(c.schedule.total_cycles(), layernorm_cycles(k, j, &cfg));
            assert_eq!(predict_cycles(&g, &cfg, FusionOptions::default()).total_cycles, layernorm_cycles(k, j, &cfg));
        }
    }

    #[test]
    fn undersized_machines_are_rejected() {
        let g = build_encoder_graph(ModelDims::tiny(), 1).unwrap();
        let mut cfg = ArchConfig::tiny();
        cfg.vxm_alu_count = 8;
        assert!(matches!(schedule_encoder(&g, &cfg, FusionOptions::default()), Err(Error::Schedule(m)) if m.contains("ALUs")));
        let mut cfg = ArchConfig::tiny();
        cfg.mxm_plane_count = 2;
        assert!(schedule_encoder(&g, &cfg, FusionOptions::default()).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let c = check(ModelDims::tiny(), 1, &ArchConfig::tiny(), FusionOptions::default());
        let text = write_dump(&c.schedule);
        let back = read_dump(&text).unwrap();
        assert_eq!(back, c.schedule);
        assert!(validate_schedule(&back).is_ok());
        let starts: Vec<u64> = text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
        assert!(starts.windows(2).all(|w| w[0] <= w[1]));
    }
}

//! Closed-form cycle prediction, evaluated without emitting instructions.

use super::graph::{Block, ComputeGraph};
use super::plan::{gemm_cycles, layernorm_cycles, FusionOptions, LayerPlan};
use crate::machine::ArchConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub total_cycles: u64,
    /// Span of each layer from its first instruction to its last completion.
    pub per_layer: Vec<u64>,
    pub microseconds: f64,
}

pub fn predict_cycles(g: &ComputeGraph, cfg: &ArchConfig, opts: FusionOptions) -> Prediction {
    let (total, per_layer) = if g.nodes.is_empty() {
        (0, Vec::new())
    } else if g.nodes.iter().all(|n| n.block == Block::Standalone) {
        let d = g.dims;
        let c = if g.node(0, "gemm").is_some() {
            gemm_cycles(d.seq_len, d.d_model, d.d_ff, cfg)
        } else {
            layernorm_cycles(d.d_model, d.seq_len, cfg)
        };
        (c, vec![c])
    } else {
        let plan = LayerPlan::new(&g.dims, cfg, opts);
        (plan.stack_cycles(g.layers), vec![plan.end; g.layers])
    };
    Prediction { total_cycles: total, per_layer, microseconds: cfg.cycles_to_us(total) }
}

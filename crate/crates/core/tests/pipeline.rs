//! End-to-end runs through the public API at the default machine size.

use tsp_core::machine::{ArchConfig, RegionKind};
use tsp_core::reference::{encoder_stack_ref, generate_model, ModelDims};
use tsp_core::scheduler::{build_encoder_graph, graph_for_model, schedule_encoder, Block, FusionOptions};
use tsp_core::simulator::{model_image, run, trace_mismatches, Mode};
use tsp_core::{Error, Exec};

#[test]
fn bert_base_stack_timing() {
    let cfg = ArchConfig::default();
    let g = build_encoder_graph(ModelDims::bert_base(), 12).unwrap();
    let fused = schedule_encoder(&g, &cfg, FusionOptions::default()).unwrap();
    let serial = schedule_encoder(&g, &cfg, FusionOptions::serialized()).unwrap();
    let r = run(&fused.schedule, &g, &fused.memory, Default::default(), &cfg, Mode::TimingOnly).unwrap().report;
    assert_eq!(r.total_cycles, 160_650);
    assert!((r.total_us - 178.5).abs() < 1e-9);
    assert_eq!(serial.schedule.total_cycles(), 212_010);
    assert_eq!(r.block_cycles(Block::SelfAttention) + r.block_cycles(Block::FeedForward), r.total_cycles);
    assert_eq!(fused.memory.bytes_of(RegionKind::Constant), 12 * ModelDims::bert_base().layer_param_bytes());
}

#[test]
fn two_bert_base_layers_are_bit_exact() {
    let cfg = ArchConfig::default();
    let model = generate_model(ModelDims::bert_base(), 2, 77).unwrap();
    let g = graph_for_model(&model).unwrap();
    let c = schedule_encoder(&g, &cfg, FusionOptions::default()).unwrap();
    let sim = run(&c.schedule, &g, &c.memory, model_image(&model).unwrap(), &cfg, Mode::Functional).unwrap();
    let (_, trace) = encoder_stack_ref(&model, Exec::Parallel).unwrap();
    assert!(trace_mismatches(&sim.values, &trace).is_empty());
}

#[test]
fn oversized_model_does_not_fit() {
    let cfg = ArchConfig::tiny();
    let dims = ModelDims { heads: 16, head_size: 64, d_model: 1024, d_ff: 4096, seq_len: 128 };
    let g = build_encoder_graph(dims, 24).unwrap();
    let err = schedule_encoder(&g, &cfg, FusionOptions::default()).unwrap_err();
    assert!(matches!(err, Error::OutOfMemory { .. }), "{err}");
}

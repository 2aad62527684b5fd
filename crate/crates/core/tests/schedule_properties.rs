use proptest::prelude::*;

use tsp_core::machine::ArchConfig;
use tsp_core::reference::{encoder_stack_ref, generate_model, ModelDims};
use tsp_core::scheduler::{
    build_encoder_graph, graph_for_model, predict_cycles, read_dump, schedule_encoder, validate_schedule, write_dump,
    FusionOptions,
};
use tsp_core::simulator::{model_image, run, trace_mismatches, Mode};
use tsp_core::Exec;

fn dims() -> impl Strategy<Value = ModelDims> {
    (1usize..=3, prop_oneof![Just(4usize), Just(8), Just(16)], 1usize..=6, 1usize..=40).prop_map(|(heads, head_size, ff, seq_len)| {
        let d_model = heads * head_size;
        ModelDims { heads, head_size, d_model, d_ff: 8 * ff, seq_len }
    })
}

fn fusion() -> impl Strategy<Value = FusionOptions> {
    prop_oneof![Just(FusionOptions::default()), Just(FusionOptions::serialized())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_are_conflict_free_and_predicted_exactly(d in dims(), layers in 1usize..=3, opts in fusion()) {
        let cfg = ArchConfig::tiny();
        let g = build_encoder_graph(d, layers).unwrap();
        let c = schedule_encoder(&g, &cfg, opts).unwrap();
        prop_assert!(validate_schedule(&c.schedule).is_ok());
        let sim = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).unwrap();
        prop_assert_eq!(sim.report.total_cycles, predict_cycles(&g, &cfg, opts).total_cycles);
        let spans = &sim.report.layer_spans;
        prop_assert!(spans.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn dumps_round_trip(d in dims(), opts in fusion()) {
        let cfg = ArchConfig::tiny();
        let g = build_encoder_graph(d, 1).unwrap();
        let s = schedule_encoder(&g, &cfg, opts).unwrap().schedule;
        let back = read_dump(&write_dump(&s)).unwrap();
        prop_assert_eq!(write_dump(&back), write_dump(&s));
        prop_assert!(validate_schedule(&back).is_ok());
    }

    #[test]
    fn longer_inputs_never_run_faster(d in dims(), extra in 1usize..=24, opts in fusion()) {
        let cfg = ArchConfig::tiny();
        let longer = ModelDims { seq_len: d.seq_len + extra, ..d };
        let wider = ModelDims { d_ff: d.d_ff + 8 * extra, ..d };
        let base = predict_cycles(&build_encoder_graph(d, 1).unwrap(), &cfg, opts).total_cycles;
        prop_assert!(predict_cycles(&build_encoder_graph(longer, 1).unwrap(), &cfg, opts).total_cycles >= base);
        prop_assert!(predict_cycles(&build_encoder_graph(wider, 1).unwrap(), &cfg, opts).total_cycles >= base);
    }

    #[test]
    fn fusion_never_loses(d in dims()) {
        let cfg = ArchConfig::tiny();
        let g = build_encoder_graph(d, 2).unwrap();
        let fused = predict_cycles(&g, &cfg, FusionOptions::default()).total_cycles;
        prop_assert!(fused <= predict_cycles(&g, &cfg, FusionOptions::serialized()).total_cycles);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_matches_reference_bit_for_bit(d in dims(), seed in any::<u64>(), opts in fusion()) {
        let cfg = ArchConfig::tiny();
        let model = generate_model(d, 2, seed).unwrap();
        let g = graph_for_model(&model).unwrap();
        let c = schedule_encoder(&g, &cfg, opts).unwrap();
        let sim = run(&c.schedule, &g, &c.memory, model_image(&model).unwrap(), &cfg, Mode::Functional).unwrap();
        let (_, trace) = encoder_stack_ref(&model, Exec::Sequential).unwrap();
        prop_assert_eq!(trace_mismatches(&sim.values, &trace), Vec::<String>::new());
    }
}

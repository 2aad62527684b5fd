//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts are always printed; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use tsp_core::machine::{ArchConfig, Instruction, Opcode, Unit};
use tsp_core::reference::{encoder_stack_ref, generate_model, Model, ModelDims};
use tsp_core::scheduler::plan::ThreePass;
use tsp_core::scheduler::{
    build_encoder_graph, build_layernorm_graph, graph_for_model, layernorm_constant, layernorm_cycles, predict_cycles,
    schedule_encoder, schedule_layernorm, Block, Compiled, ComputeGraph, FusionOptions,
};
use tsp_core::simulator::{model_image, run, trace_mismatches, units_busy_at, Mode};
use tsp_core::Exec;

type Verdict = Result<String, String>;

fn compile(dims: ModelDims, layers: usize, cfg: &ArchConfig, opts: FusionOptions) -> Result<(ComputeGraph, Compiled), String> {
    let g = build_encoder_graph(dims, layers).map_err(|e| e.to_string())?;
    let c = schedule_encoder(&g, cfg, opts).map_err(|e| e.to_string())?;
    Ok((g, c))
}

fn oracle(model: &Model, cfg: &ArchConfig) -> Result<(), String> {
    let g = graph_for_model(model).map_err(|e| e.to_string())?;
    let c = schedule_encoder(&g, cfg, FusionOptions::default()).map_err(|e| e.to_string())?;
    let img = model_image(model).map_err(|e| e.to_string())?;
    let sim = run(&c.schedule, &g, &c.memory, img, cfg, Mode::Functional).map_err(|e| e.to_string())?;
    let (_, trace) = encoder_stack_ref(model, Exec::default()).map_err(|e| e.to_string())?;
    let bad = trace_mismatches(&sim.values, &trace);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(format!("{} boundary tensors differ, first {}", bad.len(), bad[0]))
    }
}

fn c1_oracle() -> Verdict {
    let t = Instant::now();
    let tiny = ArchConfig::tiny();
    for seed in 0..100 {
        let m = generate_model(ModelDims::tiny(), 1, seed).map_err(|e| e.to_string())?;
        oracle(&m, &tiny).map_err(|e| format!("tiny seed {seed}: {e}"))?;
    }
    let tiny_time = t.elapsed();
    let t = Instant::now();
    let cfg = ArchConfig::default();
    for seed in 0..5 {
        let m = generate_model(ModelDims::bert_base(), 1, 1000 + seed).map_err(|e| e.to_string())?;
        oracle(&m, &cfg).map_err(|e| format!("BERT-base seed {seed}: {e}"))?;
    }
    let bert_time = t.elapsed();
    if tiny_time.as_secs() >= 60 {
        return Err(format!("tiny sweep took {tiny_time:.1?}"));
    }
    Ok(format!("100 tiny seeds in {tiny_time:.1?}, 5 BERT-base layers in {bert_time:.1?}, all boundaries bit-identical"))
}

fn c2_determinism() -> Verdict {
    let cfg = ArchConfig::default();
    let (g, c) = compile(ModelDims::bert_base(), 1, &cfg, FusionOptions::default())?;
    let mut cycles = Vec::with_capacity(1000);
    let first = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?.report;
    for _ in 0..1000 {
        let r = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?.report;
        if r != first {
            return Err("a repeated run produced a different report".into());
        }
        cycles.push(r.total_cycles as f64);
    }
    let mean = cycles.iter().sum::<f64>() / cycles.len() as f64;
    let sd = (cycles.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / cycles.len() as f64).sqrt();
    if sd != 0.0 {
        return Err(format!("standard deviation {sd}"));
    }
    Ok(format!("1000 runs, {mean} cycles each, standard deviation {sd}"))
}

fn c3_predictor() -> Verdict {
    let mut out = Vec::new();
    for (name, dims, cfg, layers) in [
        ("tiny", ModelDims::tiny(), ArchConfig::tiny(), 1),
        ("tiny x4", ModelDims::tiny(), ArchConfig::tiny(), 4),
        ("BERT-base", ModelDims::bert_base(), ArchConfig::default(), 1),
        ("BERT-base x12", ModelDims::bert_base(), ArchConfig::default(), 12),
    ] {
        for opts in [FusionOptions::default(), FusionOptions::serialized()] {
            let (g, c) = compile(dims, layers, &cfg, opts)?;
            let sim = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?;
            let pred = predict_cycles(&g, &cfg, opts).total_cycles;
            let simc = sim.report.total_cycles;
            let delta = (pred as f64 - simc as f64).abs() / simc as f64;
            if delta > 0.01 {
                return Err(format!("{name}: predicted {pred}, simulated {simc}"));
            }
            if opts == FusionOptions::default() {
                out.push(format!("{name} {simc} (delta {:.2}%)", delta * 100.0));
            }
        }
    }
    Ok(out.join(", "))
}

fn c4_layernorm() -> Verdict {
    let cfg = ArchConfig::default();
    let c = layernorm_constant(&cfg);
    let mut n = 0;
    for k in (64..=1024).step_by(64) {
        for j in [8, 16, 24, 32, 64, 100, 128, 200, 256] {
            let g = build_layernorm_graph(k, j, 0.05, 1e-5).map_err(|e| e.to_string())?;
            let compiled = schedule_layernorm(&g, &cfg).map_err(|e| e.to_string())?;
            let sim = run(&compiled.schedule, &g, &compiled.memory, Default::default(), &cfg, Mode::TimingOnly)
                .map_err(|e| e.to_string())?;
            let want = 3 * (j * k.div_ceil(cfg.lane_width)).div_ceil(4) as u64 + c;
            if sim.report.total_cycles != want || want != layernorm_cycles(k, j, &cfg) {
                return Err(format!("k={k} j={j}: simulated {} expected {want}", sim.report.total_cycles));
            }
            n += 1;
        }
    }
    Ok(format!("{n} (k, j) points equal 3*ceil(j*ceil(k/L)/4) + {c}"))
}

fn mxm_matmuls(c: &Compiled) -> impl Iterator<Item = &Instruction> {
    c.schedule.instructions.iter().filter(|i| i.opcode == Opcode::MatmulStream)
}

/// Cycles in `[a, b)` with no MXM plane streaming.
fn mxm_all_idle(c: &Compiled, a: u64, b: u64) -> u64 {
    let mut w: Vec<(u64, u64)> = mxm_matmuls(c).map(|i| (i.start.max(a), i.busy_end().min(b))).filter(|(x, y)| x < y).collect();
    w.sort_unstable();
    let (mut covered, mut reach) = (0, a);
    for (x, y) in w {
        if y > reach {
            covered += y - x.max(reach);
            reach = y;
        }
    }
    (b - a) - covered
}

fn ff_window(c: &Compiled) -> (u64, u64) {
    let p = &c.plan;
    (p.s_ff1, p.ff2.stream_end(p.s_ff2))
}

fn c5_fusion() -> Verdict {
    let cfg = ArchConfig::default();
    let mut idle = Vec::new();
    for opts in [FusionOptions::default(), FusionOptions::serialized()] {
        let (g, c) = compile(ModelDims::bert_base(), 1, &cfg, opts)?;
        let r = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?.report;
        idle.push(r.units.iter().filter(|u| u.class == "mxm").map(|u| u.idle).sum::<u64>());
    }
    if idle[0] >= idle[1] {
        return Err(format!("fused MXM idle {} not below serialized {}", idle[0], idle[1]));
    }

    let mut fused_gaps = Vec::new();
    let mut serial_gaps = Vec::new();
    for d_ff in [1280, 2048, 3072, 4096] {
        let dims = ModelDims { d_ff, ..ModelDims::bert_base() };
        for (opts, out) in [(FusionOptions::default(), &mut fused_gaps), (FusionOptions::serialized(), &mut serial_gaps)] {
            let (_, c) = compile(dims, 1, &cfg, opts)?;
            let (a, b) = ff_window(&c);
            out.push(mxm_all_idle(&c, a, b));
        }
    }
    if fused_gaps.windows(2).any(|w| w[0] != w[1]) {
        return Err(format!("fused GELU gap varies with d_ff: {fused_gaps:?}"));
    }

    // LN pass one rides on the GEMM's output stream: MXM never idles before
    // the last result, and pass one ends a fixed chain drain after it.
    let mut drains = BTreeSet::new();
    for d_model in [384, 768, 1024] {
        let dims = ModelDims { d_model, heads: d_model / 64, ..ModelDims::bert_base() };
        let (_, c) = compile(dims, 1, &cfg, FusionOptions::default())?;
        let p = &c.plan;
        for (ln, geom, s) in [(&p.ln1, &p.qkvo, p.s_o), (&p.ln2, &p.ff2, p.s_ff2)] {
            let results_end = geom.completion(s);
            let mxm_active = mxm_matmuls(&c).filter(|i| i.completion() > ln.p[0] && i.start < results_end).fold(
                Vec::new(),
                |mut v, i| {
                    v.push((i.start, i.completion()));
                    v
                },
            );
            let mut reach = ln.p[0];
            let mut sorted = mxm_active;
            sorted.sort_unstable();
            for (x, y) in sorted {
                if x > reach {
                    return Err(format!("MXM idle from {reach} to {x} inside LN pass one"));
                }
                reach = reach.max(y);
            }
            if reach < results_end {
                return Err("MXM idle before the last GEMM result".into());
            }
            drains.insert(ln.p[0] + ln.dur[0] - (results_end + 1));
        }
    }
    if drains.len() != 1 {
        return Err(format!("LN pass-one tail depends on size: {drains:?}"));
    }
    Ok(format!(
        "MXM idle fused {} < serialized {}; GELU gap fused {:?} vs serialized {:?}; LN pass one adds 0 idle",
        idle[0], idle[1], fused_gaps, serial_gaps
    ))
}

fn ln_windows(c: &Compiled, layers: usize) -> Vec<(u64, u64)> {
    let p = &c.plan;
    let mut v = Vec::new();
    for l in 0..layers as u64 {
        for t in [&p.ln1, &p.ln2] {
            let t: &ThreePass = t;
            for k in 0..3 {
                v.push((l * p.period + t.p[k], t.dur[k]));
            }
        }
    }
    v
}

fn c6_vxm() -> Verdict {
    let mut checked = 0u64;
    for (dims, cfg) in [(ModelDims::bert_base(), ArchConfig::default()), (ModelDims::tiny(), ArchConfig::tiny())] {
        for opts in [FusionOptions::default(), FusionOptions::serialized()] {
            let (_, c) = compile(dims, 2, &cfg, opts)?;
            for (start, dur) in ln_windows(&c, 2) {
                let alus: Vec<&Instruction> = c
                    .schedule
                    .instructions
                    .iter()
                    .filter(|i| matches!(i.unit, Unit::Alu(_)) && i.start < start + dur && i.busy_end() > start)
                    .collect();
                for t in [start, start + dur / 2, start + dur - 1] {
                    let n = units_busy_at(&c.schedule, "alu", t);
                    if n != cfg.vxm_alu_count {
                        return Err(format!("{n}/{} ALUs reserved at cycle {t}", cfg.vxm_alu_count));
                    }
                }
                // Every cycle: the 16 chains that start at the window must cover it whole.
                let full: BTreeSet<Unit> = alus.iter().filter(|i| i.start <= start && i.busy_end() >= start + dur).map(|i| i.unit).collect();
                if full.len() != cfg.vxm_alu_count {
                    return Err(format!("only {} ALUs span the LN window at {start}", full.len()));
                }
                checked += dur;
            }
        }
    }
    Ok(format!("16/16 ALUs reserved across {checked} LN pass cycles"))
}

fn c7_single_read() -> Verdict {
    let mut out = Vec::new();
    for opts in [FusionOptions::default(), FusionOptions::serialized()] {
        let cfg = ArchConfig::default();
        let (_, c) = compile(ModelDims::bert_base(), 1, &cfg, opts)?;
        for z in ["layer0.z1", "layer0.z2"] {
            let reads: Vec<&Instruction> = c.schedule.instructions.iter().filter(|i| i.opcode == Opcode::Read && i.tensor == z).collect();
            let windows: BTreeSet<(u64, u64)> = reads.iter().map(|i| (i.start, i.duration)).collect();
            let vectors: u64 = reads.iter().map(|i| i.vector_count).sum();
            let need = (128 * 768usize.div_ceil(cfg.lane_width)) as u64;
            if windows.len() != 1 || vectors != need {
                return Err(format!("{z}: {} read windows covering {vectors} of {need} vectors", windows.len()));
            }
        }
        out.push(format!("{} reads", if opts.ln_pass1 { "fused" } else { "serialized" }));
    }
    Ok(format!("Z read in exactly one pass per LN ({})", out.join(", ")))
}

fn c8_breakdown() -> Verdict {
    let cfg = ArchConfig::default();
    let (g, c) = compile(ModelDims::bert_base(), 12, &cfg, FusionOptions::default())?;
    let r = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?.report;
    let spans: BTreeSet<u64> = r.layer_spans.iter().copied().collect();
    if spans.len() != 1 || r.layer_spans.len() != 12 {
        return Err(format!("layer spans differ: {:?}", r.layer_spans));
    }
    let sa = r.block_cycles(Block::SelfAttention);
    let ff = r.block_cycles(Block::FeedForward);
    let share = (sa + ff) as f64 / r.total_cycles as f64;
    if share < 0.83 {
        return Err(format!("SA+FF share {share:.3}"));
    }
    Ok(format!(
        "12 layers of {} cycles; SA {:.1}%, FF {:.1}%, SA+FF {:.1}% of {} cycles",
        r.layer_spans[0],
        100.0 * sa as f64 / r.total_cycles as f64,
        100.0 * ff as f64 / r.total_cycles as f64,
        100.0 * share,
        r.total_cycles
    ))
}

fn c9_memory() -> Verdict {
    let cfg = ArchConfig::default();
    let (g, c) = compile(ModelDims::bert_base(), 12, &cfg, FusionOptions::default())?;
    let r = run(&c.schedule, &g, &c.memory, Default::default(), &cfg, Mode::TimingOnly).map_err(|e| e.to_string())?.report;
    let m = r.memory;
    let sum = m.constant + m.scratchpad + m.instruction + m.unused;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(format!("fractions sum to {sum}"));
    }
    if m.scratchpad * 10.0 > m.constant {
        return Err(format!("scratchpad {:.4} not far below constant {:.4}", m.scratchpad, m.constant));
    }
    Ok(format!(
        "constant {:.2}%, scratchpad {:.2}%, instruction {:.3}%, unused {:.2}% (sum {:.1}%); live scratch peak {} B",
        100.0 * m.constant,
        100.0 * m.scratchpad,
        100.0 * m.instruction,
        100.0 * m.unused,
        100.0 * sum,
        r.scratchpad_high_water
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("oracle equivalence", c1_oracle),
        ("determinism", c2_determinism),
        ("predictor fidelity", c3_predictor),
        ("layer-norm cycle formula", c4_layernorm),
        ("fusion benefit", c5_fusion),
        ("VXM utilization", c6_vxm),
        ("single-read layer norm", c7_single_read),
        ("breakdown shape", c8_breakdown),
        ("memory report", c9_memory),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} ({name}): PASS: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {why}", n + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Closed-form timing of one encoder layer.
//!
//! Every block start is a max over the data and resource constraints that
//! bind it; the emitter places instructions at exactly these cycles and the
//! predictor sums them without building a schedule.

use super::chains::{self, PARALLEL_CHAINS};
use crate::machine::ArchConfig;
use crate::reference::ModelDims;

/// Which of the overlaps are applied; all on by default. Turning one off
/// yields the serialized baseline for that block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionOptions {
    /// GELU consumes FF1 results as they leave the MXM, FF2 starts on finished tiles.
    pub gelu: bool,
    /// LN pass one consumes the producing GEMM's stream.
    pub ln_pass1: bool,
    /// Softmax pass one streams with the scores GEMM and the V GEMM overlaps softmax.
    pub softmax: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { gelu: true, ln_pass1: true, softmax: true }
    }
}

impl FusionOptions {
    pub fn serialized() -> Self {
        FusionOptions { gelu: false, ln_pass1: false, softmax: false }
    }
}

/// Latencies the plan is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lat {
    pub hop: u64,
    pub mem: u64,
    pub install: u64,
    pub depth: u64,
    pub sxm: u64,
    pub requant: u64,
    pub gelu: u64,
    pub ln: [u64; 3],
    pub ln_mean: u64,
    pub ln_rstd: u64,
    pub sm: [u64; 3],
    pub sm_max: u64,
    pub sm_recip: u64,
}

impl Lat {
    pub fn new(cfg: &ArchConfig) -> Self {
        let l = |ops: &[crate::machine::AluOp]| chains::latency(ops, cfg);
        Lat {
            hop: cfg.stream_hop_latency_cycles,
            mem: cfg.mem_read_latency_cycles,
            install: cfg.mxm_install_latency_cycles,
            depth: cfg.mxm_pipeline_depth_cycles,
            sxm: cfg.sxm_reorder_latency_cycles,
            requant: l(&chains::REQUANT),
            gelu: l(&chains::GELU_CHAIN),
            ln: [l(&chains::LN_PASS1), l(&chains::LN_PASS2), l(&chains::LN_PASS3)],
            ln_mean: l(&chains::LN_MEAN_STEP),
            ln_rstd: l(&chains::LN_RSTD_STEP),
            sm: [l(&chains::SM_PASS1), l(&chains::SM_PASS2), l(&chains::SM_PASS3)],
            sm_max: l(&chains::SM_MAX_STEP),
            sm_recip: l(&chains::SM_RECIP_STEP),
        }
    }

    /// Cycles from a requant group's first input vector to its last MEM write.
    pub fn requant_group(&self, m: u64) -> u64 {
        3 * self.hop + self.requant + self.sxm + m
    }
}

/// Pass structure of a (batched) GEMM on one plane.
///
/// Weight tiles are visited column-major: for every head and output tile, all
/// input tiles in order; accumulators drain during the last input-tile pass.
/// Consecutive passes start `period = max(m, install)` cycles apart, so the
/// next tile's install hides behind the current pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmGeom {
    pub heads: u64,
    /// Activation vectors streamed per pass.
    pub m: u64,
    pub nin: u64,
    pub nout: u64,
    pub period: u64,
    pub depth: u64,
}

impl GemmGeom {
    pub fn new(heads: usize, m: usize, k: usize, n: usize, cfg: &ArchConfig) -> Self {
        let l = cfg.lane_width;
        GemmGeom {
            heads: heads as u64,
            m: m as u64,
            nin: k.div_ceil(l) as u64,
            nout: n.div_ceil(l) as u64,
            period: (m as u64).max(cfg.mxm_install_latency_cycles),
            depth: cfg.mxm_pipeline_depth_cycles,
        }
    }

    pub fn passes(&self) -> u64 {
        self.heads * self.nin * self.nout
    }

    /// Pass index of `(head, out_tile, in_tile)`.
    pub fn pass_index(&self, head: u64, out: u64, inp: u64) -> u64 {
        (head * self.nout + out) * self.nin + inp
    }

    pub fn pass_start(&self, s: u64, p: u64) -> u64 {
        s + p * self.period
    }

    /// First cycle results of output tile `(head, out)` leave the plane.
    pub fn emit_start(&self, s: u64, head: u64, out: u64) -> u64 {
        self.pass_start(s, self.pass_index(head, out, self.nin - 1)) + self.depth
    }

    pub fn first_out(&self, s: u64) -> u64 {
        self.emit_start(s, 0, 0)
    }

    pub fn last_emit(&self, s: u64) -> u64 {
        self.emit_start(s, self.heads - 1, self.nout - 1)
    }

    pub fn completion(&self, s: u64) -> u64 {
        self.last_emit(s) + self.m
    }

    /// Length of the window from the first to the last result.
    pub fn emit_span(&self) -> u64 {
        self.completion(0) - self.first_out(0)
    }

    /// Last cycle (exclusive) any pass streams on the plane.
    pub fn stream_end(&self, s: u64) -> u64 {
        self.pass_start(s, self.passes() - 1) + self.m
    }
}

/// Where pass one of a three-pass reduction gets its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass1Source {
    /// Streamed from a GEMM: the chains run `[start, start + dur)`.
    Fused { start: u64, dur: u64 },
    /// Read from MEM four vectors per cycle once `ready`.
    Mem { ready: u64 },
}

/// Timing of a three-pass LN or softmax. Pass windows are `[p_i, p_i + dur_i)`,
/// the normalization steps run single-cycle at `step_a` and `step_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreePass {
    pub fused: bool,
    pub read1: u64,
    pub p: [u64; 3],
    pub dur: [u64; 3],
    pub step_a: u64,
    pub step_b: u64,
    /// Completion of the pass-three MEM writes.
    pub end: u64,
}

impl ThreePass {
    /// `n4` is the per-chain vector count of passes two and three.
    pub fn new(lat: &Lat, chain: [u64; 3], step: [u64; 2], n4: u64, src: Pass1Source) -> Self {
        let (h, m) = (lat.hop, lat.mem);
        let (fused, read1, p1, d1) = match src {
            Pass1Source::Fused { start, dur } => (true, start, start, dur),
            Pass1Source::Mem { ready } => (false, ready, ready + m + h, n4),
        };
        let c1 = p1 + chain[0] + d1;
        let w1 = c1 + h;
        let a = c1 + h - 1;
        let p2 = (w1 + m + h).max(a + 1 + step[0] + h - 1);
        let c2 = p2 + chain[1] + n4;
        let b = c2 + h - 1;
        let p3 = (c2 + h + m + h).max(b + 1 + step[1] + h - 1);
        let c3 = p3 + chain[2] + n4;
        ThreePass { fused, read1, p: [p1, p2, p3], dur: [d1, n4, n4], step_a: a, step_b: b, end: c3 + h }
    }

    pub fn layernorm(lat: &Lat, n4: u64, src: Pass1Source) -> Self {
        Self::new(lat, lat.ln, [lat.ln_mean, lat.ln_rstd], n4, src)
    }

    pub fn softmax(lat: &Lat, n4: u64, src: Pass1Source) -> Self {
        Self::new(lat, lat.sm, [lat.sm_max, lat.sm_recip], n4, src)
    }
}

/// Vectors per chain when `vectors` are spread over the parallel chains.
pub fn per_chain(vectors: u64) -> u64 {
    vectors.div_ceil(PARALLEL_CHAINS as u64)
}

/// The fixed part of a standalone layer normalization's cycle count:
/// MEM read latency and hops in front of pass one, the chain pipeline fill of
/// each pass, and the two normalization steps (mean, then rstd) between
/// passes, each bounded below by the MEM write-to-read turnaround.
pub fn layernorm_constant(cfg: &ArchConfig) -> u64 {
    let l = Lat::new(cfg);
    let (h, m) = (l.hop, l.mem);
    (m + h) + l.ln[0] + 2 * h + m.max(l.ln_mean - 1) + l.ln[1] + 2 * h + m.max(l.ln_rstd - 1) + l.ln[2] + h
}

/// Cycles of a standalone layer normalization over `j` columns of `k`
/// features: three passes at four physical vectors per cycle plus the constant.
pub fn layernorm_cycles(k: usize, j: usize, cfg: &ArchConfig) -> u64 {
    let vectors = (j * k.div_ceil(cfg.lane_width)) as u64;
    3 * per_chain(vectors) + layernorm_constant(cfg)
}

/// Cycles of a standalone GEMM whose results are written back to MEM.
pub fn gemm_cycles(m: usize, k: usize, n: usize, cfg: &ArchConfig) -> u64 {
    let lat = Lat::new(cfg);
    let s = lat.install.max(lat.mem + lat.hop);
    GemmGeom::new(1, m, k, n, cfg).completion(s) + lat.hop
}

/// Block start cycles for one layer whose first instruction issues at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub opts: FusionOptions,
    pub lat: Lat,
    /// Cycles between the first instruction and the Q/K first pass.
    pub lead: u64,
    pub qkvo: GemmGeom,
    pub scores: GemmGeom,
    pub context: GemmGeom,
    pub ff1: GemmGeom,
    pub ff2: GemmGeom,
    pub s_q: u64,
    pub s_v: u64,
    pub s_scores: u64,
    pub softmax: ThreePass,
    pub s_ctx: u64,
    pub s_o: u64,
    pub ln1: ThreePass,
    pub s_ff1: u64,
    /// Unfused GELU pass `(read start, chain start, vectors)`.
    pub gelu_pass: Option<(u64, u64, u64)>,
    pub s_ff2: u64,
    pub ln2: ThreePass,
    /// Completion of the layer's last instruction.
    pub end: u64,
    /// Cycles between consecutive layers' first instructions.
    pub period: u64,
}

impl LayerPlan {
    pub fn new(dims: &ModelDims, cfg: &ArchConfig, opts: FusionOptions) -> Self {
        let lat = Lat::new(cfg);
        let (h, m) = (lat.hop, lat.mem);
        let ModelDims { heads, head_size, d_model, d_ff, seq_len: s } = *dims;
        let su = s as u64;
        let l = cfg.lane_width;
        let qkvo = GemmGeom::new(1, s, d_model, d_model, cfg);
        let scores = GemmGeom::new(heads, s, head_size, s, cfg);
        let context = GemmGeom::new(heads, s, s, head_size, cfg);
        let ff1 = GemmGeom::new(1, s, d_model, d_ff, cfg);
        let ff2 = GemmGeom::new(1, s, d_ff, d_model, cfg);

        let lead = lat.install.max(m + h);
        let s_q = lead;
        let qk_written = qkvo.last_emit(s_q) + lat.requant_group(su);
        let s_scores = qk_written + lat.install + m + h;

        let sm_vectors = (heads * s * s.div_ceil(l)) as u64;
        let sm_src = if opts.softmax {
            Pass1Source::Fused { start: scores.first_out(s_scores) + h, dur: scores.emit_span() }
        } else {
            Pass1Source::Mem { ready: scores.completion(s_scores) + h }
        };
        let softmax = ThreePass::softmax(&lat, per_chain(sm_vectors), sm_src);

        let s_v = if opts.softmax { s_scores } else { softmax.end + m + h };
        let v_written = qkvo.last_emit(s_v) + lat.requant_group(su);
        let s_ctx = (softmax.end + m + h).max(v_written + lat.install + m + h);
        let ctx_written = context.last_emit(s_ctx) + lat.requant_group(su);
        let s_o = ctx_written + m + h;

        let ln_n4 = per_chain((s * d_model.div_ceil(l)) as u64);
        let ln_src = |g: &GemmGeom, start: u64| {
            if opts.ln_pass1 {
                Pass1Source::Fused { start: g.first_out(start) + h, dur: g.emit_span() }
            } else {
                Pass1Source::Mem { ready: g.completion(start) + h }
            }
        };
        let ln1 = ThreePass::layernorm(&lat, ln_n4, ln_src(&qkvo, s_o));
        let s_ff1 = ln1.end + m + h;

        let (gelu_pass, s_ff2) = if opts.gelu {
            // FF2 pass (0, i) reads g8 tile i, written by the GELU group of FF1 tile i.
            let mut s2 = 0u64;
            for i in 0..ff2.nin {
                let written = ff1.emit_start(s_ff1, 0, i) + 2 * h + lat.gelu + su;
                s2 = s2.max((written + m + h).saturating_sub(i * ff2.period));
            }
            // LN2 pass one must not start before the last GELU group frees the ALUs.
            let alus_free = ff1.last_emit(s_ff1) + su;
            s2 = s2.max(alus_free.saturating_sub((ff2.nin - 1) * ff2.period + ff2.depth));
            (None, s2)
        } else {
            let ready = ff1.completion(s_ff1) + h;
            let vectors = ff1.nout * su;
            let chain = ready + m + h;
            let written = chain + lat.gelu + vectors + h;
            (Some((ready, chain, vectors)), written + m + h)
        };
        let ln2 = ThreePass::layernorm(&lat, ln_n4, ln_src(&ff2, s_ff2));
        let end = ln2.end;
        LayerPlan {
            opts,
            lat,
            lead,
            qkvo,
            scores,
            context,
            ff1,
            ff2,
            s_q,
            s_v,
            s_scores,
            softmax,
            s_ctx,
            s_o,
            ln1,
            s_ff1,
            gelu_pass,
            s_ff2,
            ln2,
            end,
            period: end + m + h - s_q,
        }
    }

    /// Completion of an `n`-layer stack.
    pub fn stack_cycles(&self, n: usize) -> u64 {
        if n == 0 {
            0
        } else {
            (n as u64 - 1) * self.period + self.end
        }
    }

    /// Cycles of the self-attention block: up to LN1's last write.
    pub fn sa_cycles(&self) -> u64 {
        self.ln1.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_constant_default() {
        let cfg = ArchConfig::default();
        assert_eq!(layernorm_constant(&cfg), 27);
        assert_eq!(layernorm_cycles(768, 128, &cfg), 288 + 27);
    }

    #[test]
    fn standalone_three_pass_matches_formula() {
        let cfg = ArchConfig::default();
        let lat = Lat::new(&cfg);
        for (k, j) in [(64, 8), (768, 128), (1000, 7), (1024, 256)] {
            let n4 = per_chain((j * (k as usize).div_ceil(320)) as u64);
            let t = ThreePass::layernorm(&lat, n4, Pass1Source::Mem { ready: 0 });
            assert_eq!(t.end, layernorm_cycles(k, j, &cfg));
        }
    }

    #[test]
    fn multipass_gemm_has_no_gaps_at_bert_base() {
        let cfg = ArchConfig::default();
        let g = GemmGeom::new(1, 128, 768, 768, &cfg);
        assert_eq!((g.nin, g.nout, g.passes()), (3, 3, 9));
        assert_eq!(g.period, g.m);
        assert_eq!(g.stream_end(0) - g.pass_start(0, 0), 9 * 128);
    }

    #[test]
    fn fused_gelu_gap_is_size_independent() {
        let cfg = ArchConfig::default();
        let mut gaps = Vec::new();
        for f in [1280, 2560, 3072, 4096] {
            let dims = ModelDims { d_ff: f, ..ModelDims::bert_base() };
            let p = LayerPlan::new(&dims, &cfg, FusionOptions::default());
            gaps.push(p.s_ff2 as i64 - p.ff1.stream_end(p.s_ff1) as i64);
        }
        assert!(gaps.iter().all(|&g| g <= 0), "{gaps:?}");
    }

    #[test]
    fn serialized_is_slower() {
        let cfg = ArchConfig::default();
        let dims = ModelDims::bert_base();
        let fused = LayerPlan::new(&dims, &cfg, FusionOptions::default());
        let serial = LayerPlan::new(&dims, &cfg, FusionOptions::serialized());
        assert!(fused.end < serial.end);
    }
}

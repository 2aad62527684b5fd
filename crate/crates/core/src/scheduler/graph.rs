//! Encoder-layer compute graph.
//!
//! Nodes carry the kernel they fire ([`Op`]) and the names of the tensors they
//! read and write. Tensor names are `layer{l}.{name}` for activations and
//! parameters, `input.q` / `input.fp` for the stack input.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::reference::{EncoderParams, LayerScales, Model, ModelDims};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Gemm,
    BatchedGemm,
    GeluChain,
    LnPass1,
    LnPass2,
    LnPass3,
    SoftmaxPass(u8),
    Reorder,
    ResidualAdd,
    Quantize,
    Dequantize,
}

/// Resource class a node's instructions run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResourceClass {
    Mxm,
    Vxm,
    Sxm,
}

impl NodeKind {
    pub fn resource(self) -> ResourceClass {
        match self {
            NodeKind::Gemm | NodeKind::BatchedGemm => ResourceClass::Mxm,
            NodeKind::Reorder => ResourceClass::Sxm,
            _ => ResourceClass::Vxm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    SelfAttention,
    FeedForward,
    Standalone,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::SelfAttention => "SA",
            Block::FeedForward => "FF",
            Block::Standalone => "standalone",
        }
    }
}

/// Kernel fired when a node completes. Inputs and outputs are positional, in
/// the order documented on each variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// `[a, w, bias?] -> [acc]`
    Gemm { bias: bool },
    /// `[a, b] -> [acc]`
    BatchedGemm,
    /// `[acc] -> [fp, q]`
    Requant { scale: f32 },
    /// `[x] -> [heads]`
    SplitHeads { heads: usize, transposed: bool },
    /// `[heads] -> [x]`
    ConcatHeads,
    /// `[scores] -> [x, max]`; the `1/sqrt(head_size)` factor is folded into the dequantize scale.
    SoftmaxMax { head_size: usize },
    /// `[x, max] -> [e, sum]`
    SoftmaxExp,
    /// `[e, sum] -> [probs8]`
    SoftmaxNorm,
    /// `[acc] -> [fp]`
    Dequantize,
    /// `[a, b] -> [a + b]`
    Residual,
    /// `[z] -> [mean]`
    LnMean,
    /// `[z, mean, gamma] -> [gz, rstd]`
    LnVar { eps: f32 },
    /// `[gz, rstd, beta] -> [fp, q]`
    LnOut { scale: f32 },
    /// `[acc] -> [fp, act, q]`
    Gelu { scale: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Constant,
    Input,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub role: TensorRole,
}

impl TensorInfo {
    pub fn bytes(&self) -> u64 {
        let width = match self.dtype {
            DType::Int8 => 1,
            DType::Int32 | DType::Fp32 => 4,
        };
        width * self.dims.iter().product::<usize>() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u32,
    pub layer: u32,
    /// `layer{l}.{short}`
    pub name: String,
    pub kind: NodeKind,
    pub block: Block,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn short_name(&self) -> &str {
        self.name.split_once('.').map_or(&self.name, |(_, s)| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    pub dims: ModelDims,
    pub layers: usize,
    pub nodes: Vec<Node>,
    pub tensors: BTreeMap<String, TensorInfo>,
}

impl ComputeGraph {
    /// Producer of each activation tensor.
    pub fn producers(&self) -> BTreeMap<&str, u32> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            for o in &n.outputs {
                m.insert(o.as_str(), n.id);
            }
        }
        m
    }

    /// Distinct `(producer, consumer)` node pairs.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let prod = self.producers();
        let mut e: Vec<(u32, u32)> = self
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().filter_map(|i| prod.get(i.as_str()).map(|&p| (p, n.id))).collect::<Vec<_>>())
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn node(&self, layer: usize, short: &str) -> Option<&Node> {
        let name = format!("layer{layer}.{short}");
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorInfo> {
        self.tensors.get(name).ok_or_else(|| Error::Schedule(format!("unknown tensor `{name}`")))
    }

    /// Checks acyclicity and the dtype contract of every edge.
    pub fn validate(&self) -> Result<()> {
        let prod = self.producers();
        let mut problems = Vec::new();
        for n in &self.nodes {
            for i in &n.inputs {
                match prod.get(i.as_str()) {
                    // Nodes are stored in a topological order; a back edge is a cycle.
                    Some(&p) if p >= n.id => problems.push(format!("cycle: {} reads {i} produced later", n.name)),
                    None if !self.tensors.get(i).is_some_and(|t| t.role != TensorRole::Activation) => {
                        problems.push(format!("{} reads {i} which nothing produces", n.name))
                    }
                    _ => {}
                }
            }
            let dt = |names: &[String]| -> Vec<Option<DType>> {
                names.iter().map(|x| self.tensors.get(x).map(|t| t.dtype)).collect()
            };
            let (ins, outs) = (dt(&n.inputs), dt(&n.outputs));
            let (want_in, want_out) = expected_dtypes(n.op);
            let some = |v: Vec<DType>| v.into_iter().map(Some).collect::<Vec<_>>();
            if ins != some(want_in.clone()) {
                problems.push(format!("{}: input dtypes {ins:?}, expected {want_in:?}", n.name));
            }
            if outs != some(want_out.clone()) {
                problems.push(format!("{}: output dtypes {outs:?}, expected {want_out:?}", n.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Conflicts(problems))
        }
    }
}

fn expected_dtypes(op: Op) -> (Vec<DType>, Vec<DType>) {
    use DType::*;
    match op {
        Op::Gemm { bias: true } => (vec![Int8, Int8, Int32], vec![Int32]),
        Op::Gemm { bias: false } => (vec![Int8, Int8], vec![Int32]),
        Op::BatchedGemm => (vec![Int8, Int8], vec![Int32]),
        Op::Requant { .. } => (vec![Int32], vec![Fp32, Int8]),
        Op::SplitHeads { .. } | Op::ConcatHeads => (vec![Int8], vec![Int8]),
        Op::SoftmaxMax { .. } => (vec![Int32], vec![Fp32, Fp32]),
        Op::SoftmaxExp => (vec![Fp32, Fp32], vec![Fp32, Fp32]),
        Op::SoftmaxNorm => (vec![Fp32, Fp32], vec![Int8]),
        Op::Dequantize => (vec![Int32], vec![Fp32]),
        Op::Residual => (vec![Fp32, Fp32], vec![Fp32]),
        Op::LnMean => (vec![Fp32], vec![Fp32]),
        Op::LnVar { .. } => (vec![Fp32, Fp32, Fp32], vec![Fp32, Fp32]),
        Op::LnOut { .. } => (vec![Fp32, Fp32, Fp32], vec![Fp32, Int8]),
        Op::Gelu { .. } => (vec![Int32], vec![Fp32, Fp32, Int8]),
    }
}

/// Per-layer parameters the graph bakes into its ops.
#[derive(Debug, Clone, Copy)]
pub struct LayerConsts {
    pub scales: LayerScales,
    pub eps: f32,
}

impl LayerConsts {
    /// Placeholder constants for timing-only graphs.
    pub fn unit() -> Self {
        LayerConsts {
            scales: LayerScales { input: 1.0, q: 1.0, k: 1.0, v: 1.0, ctx: 1.0, ln1: 1.0, gelu: 1.0, ln2: 1.0 },
            eps: crate::reference::DEFAULT_EPS,
        }
    }
}

struct GraphBuilder {
    dims: ModelDims,
    nodes: Vec<Node>,
    tensors: BTreeMap<String, TensorInfo>,
}

impl GraphBuilder {
    fn tensor(&mut self, name: &str, dtype: DType, dims: Vec<usize>, role: TensorRole) -> String {
        self.tensors.insert(name.to_string(), TensorInfo { dtype, dims, role });
        name.to_string()
    }

    fn node(&mut self, layer: usize, short: &str, kind: NodeKind, block: Block, op: Op, inputs: Vec<String>, outputs: Vec<String>) {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            id,
            layer: layer as u32,
            name: format!("layer{layer}.{short}"),
            kind,
            block,
            op,
            inputs,
            outputs,
        });
    }

    fn layer(&mut self, l: usize, c: &LayerConsts, x8: String, xfp: String) -> (String, String) {
        use DType::*;
        use TensorRole::*;
        let ModelDims { heads: h, head_size: dk, d_model: d, d_ff: f, seq_len: s } = self.dims;
        let t = |n: &str| format!("layer{l}.{n}");
        let sa = Block::SelfAttention;
        let ff = Block::FeedForward;
        let batched = if h == 1 { NodeKind::Gemm } else { NodeKind::BatchedGemm };

        for (w, b, n) in [("wq", "bq", d), ("wk", "bk", d), ("wv", "bv", d), ("wo", "bo", d), ("w1", "b1", f), ("w2", "b2", d)] {
            let k = if w == "w2" { f } else { d };
            self.tensor(&t(w), Int8, vec![k, n], Constant);
            self.tensor(&t(b), Int32, vec![n], Constant);
        }
        for g in ["gamma1", "beta1", "gamma2", "beta2"] {
            self.tensor(&t(g), Fp32, vec![d], Constant);
        }

        let sc = c.scales;
        for (p, scale) in [("q", sc.q), ("k", sc.k), ("v", sc.v)] {
            let acc = self.tensor(&t(&format!("{p}_acc")), Int32, vec![s, d], Activation);
            let fp = self.tensor(&t(&format!("{p}_fp")), Fp32, vec![s, d], Activation);
            let q8 = self.tensor(&t(&format!("{p}8")), Int8, vec![s, d], Activation);
            let (hd, transposed, hn) = match p {
                "k" => (vec![h, dk, s], true, "kt_heads"),
                "q" => (vec![h, s, dk], false, "q_heads"),
                _ => (vec![h, s, dk], false, "v_heads"),
            };
            let heads = self.tensor(&t(hn), Int8, hd, Activation);
            self.node(l, &format!("{p}_proj"), NodeKind::Gemm, sa, Op::Gemm { bias: true }, vec![x8.clone(), t(&format!("w{p}")), t(&format!("b{p}"))], vec![acc.clone()]);
            self.node(l, &format!("{p}_quant"), NodeKind::Quantize, sa, Op::Requant { scale }, vec![acc], vec![fp, q8.clone()]);
            self.node(l, &format!("{p}_split"), NodeKind::Reorder, sa, Op::SplitHeads { heads: h, transposed }, vec![q8], vec![heads]);
        }

        let scores = self.tensor(&t("scores_acc"), Int32, vec![h, s, s], Activation);
        self.node(l, "scores", batched, sa, Op::BatchedGemm, vec![t("q_heads"), t("kt_heads")], vec![scores.clone()]);
        let smx = self.tensor(&t("sm_x"), Fp32, vec![h, s, s], Activation);
        let smm = self.tensor(&t("sm_max"), Fp32, vec![h * s], Activation);
        self.node(l, "softmax1", NodeKind::SoftmaxPass(1), sa, Op::SoftmaxMax { head_size: dk }, vec![scores], vec![smx.clone(), smm.clone()]);
        let sme = self.tensor(&t("sm_e"), Fp32, vec![h, s, s], Activation);
        let sms = self.tensor(&t("sm_sum"), Fp32, vec![h * s], Activation);
        self.node(l, "softmax2", NodeKind::SoftmaxPass(2), sa, Op::SoftmaxExp, vec![smx, smm], vec![sme.clone(), sms.clone()]);
        let probs = self.tensor(&t("probs8"), Int8, vec![h, s, s], Activation);
        self.node(l, "softmax3", NodeKind::SoftmaxPass(3), sa, Op::SoftmaxNorm, vec![sme, sms], vec![probs.clone()]);

        let ctx_acc = self.tensor(&t("ctx_acc"), Int32, vec![h, s, dk], Activation);
        self.node(l, "context", batched, sa, Op::BatchedGemm, vec![probs, t("v_heads")], vec![ctx_acc.clone()]);
        let ctx_fp = self.tensor(&t("ctx_fp"), Fp32, vec![h, s, dk], Activation);
        let ctx8h = self.tensor(&t("ctx8_heads"), Int8, vec![h, s, dk], Activation);
        self.node(l, "ctx_quant", NodeKind::Quantize, sa, Op::Requant { scale: sc.ctx }, vec![ctx_acc], vec![ctx_fp, ctx8h.clone()]);
        let ctx8 = self.tensor(&t("ctx8"), Int8, vec![s, d], Activation);
        self.node(l, "ctx_concat", NodeKind::Reorder, sa, Op::ConcatHeads, vec![ctx8h], vec![ctx8.clone()]);

        let o_acc = self.tensor(&t("o_acc"), Int32, vec![s, d], Activation);
        self.node(l, "o_proj", NodeKind::Gemm, sa, Op::Gemm { bias: true }, vec![ctx8, t("wo"), t("bo")], vec![o_acc.clone()]);
        let (sa_fp, sa8) = self.add_norm(l, "1", sa, o_acc, xfp, sc.ln1, c.eps);

        let f1_acc = self.tensor(&t("f1_acc"), Int32, vec![s, f], Activation);
        self.node(l, "ff1", NodeKind::Gemm, ff, Op::Gemm { bias: true }, vec![sa8, t("w1"), t("b1")], vec![f1_acc.clone()]);
        let f1_fp = self.tensor(&t("f1_fp"), Fp32, vec![s, f], Activation);
        let act = self.tensor(&t("gelu"), Fp32, vec![s, f], Activation);
        let g8 = self.tensor(&t("g8"), Int8, vec![s, f], Activation);
        self.node(l, "gelu", NodeKind::GeluChain, ff, Op::Gelu { scale: sc.gelu }, vec![f1_acc], vec![f1_fp, act, g8.clone()]);
        let f2_acc = self.tensor(&t("f2_acc"), Int32, vec![s, d], Activation);
        self.node(l, "ff2", NodeKind::Gemm, ff, Op::Gemm { bias: true }, vec![g8, t("w2"), t("b2")], vec![f2_acc.clone()]);
        self.add_norm(l, "2", ff, f2_acc, sa_fp, sc.ln2, c.eps)
    }

    /// Dequantize, residual add and the three normalization passes.
    fn add_norm(&mut self, l: usize, i: &str, block: Block, acc: String, residual: String, scale: f32, eps: f32) -> (String, String) {
        use DType::*;
        use TensorRole::Activation;
        let ModelDims { d_model: d, seq_len: s, .. } = self.dims;
        let t = |n: &str| format!("layer{l}.{n}");
        let (deq, res, fp_name, q_name) = match i {
            "1" => ("o_deq", "res1", "sa_fp", "sa8"),
            _ => ("f2_deq", "res2", "out_fp", "out8"),
        };
        let src = if i == "1" { "o_fp" } else { "f2_fp" };
        let fp = self.tensor(&t(src), Fp32, vec![s, d], Activation);
        self.node(l, deq, NodeKind::Dequantize, block, Op::Dequantize, vec![acc], vec![fp.clone()]);
        let z = self.tensor(&t(&format!("z{i}")), Fp32, vec![s, d], Activation);
        self.node(l, res, NodeKind::ResidualAdd, block, Op::Residual, vec![fp, residual], vec![z.clone()]);
        let mean = self.tensor(&t(&format!("mean{i}")), Fp32, vec![s], Activation);
        self.node(l, &format!("ln{i}_p1"), NodeKind::LnPass1, block, Op::LnMean, vec![z.clone()], vec![mean.clone()]);
        let gz = self.tensor(&t(&format!("gz{i}")), Fp32, vec![s, d], Activation);
        let rstd = self.tensor(&t(&format!("rstd{i}")), Fp32, vec![s], Activation);
        self.node(l, &format!("ln{i}_p2"), NodeKind::LnPass2, block, Op::LnVar { eps }, vec![z, mean, t(&format!("gamma{i}"))], vec![gz.clone(), rstd.clone()]);
        let out_fp = self.tensor(&t(fp_name), Fp32, vec![s, d], Activation);
        let out8 = self.tensor(&t(q_name), Int8, vec![s, d], Activation);
        self.node(l, &format!("ln{i}_p3"), NodeKind::LnPass3, block, Op::LnOut { scale }, vec![gz, rstd, t(&format!("beta{i}"))], vec![out_fp.clone(), out8.clone()]);
        (out_fp, out8)
    }
}

/// Graph of `consts.len()` stacked encoder layers.
pub fn build_graph(dims: ModelDims, consts: &[LayerConsts]) -> Result<ComputeGraph> {
    dims.validate()?;
    if consts.is_empty() {
        return Err(Error::Params("at least one layer is required".into()));
    }
    let mut b = GraphBuilder { dims, nodes: Vec::new(), tensors: BTreeMap::new() };
    let shape = vec![dims.seq_len, dims.d_model];
    let mut x8 = b.tensor("input.q", DType::Int8, shape.clone(), TensorRole::Input);
    let mut xfp = b.tensor("input.fp", DType::Fp32, shape, TensorRole::Input);
    for (l, c) in consts.iter().enumerate() {
        (xfp, x8) = b.layer(l, c, x8, xfp);
    }
    let g = ComputeGraph { dims, layers: consts.len(), nodes: b.nodes, tensors: b.tensors };
    g.validate()?;
    Ok(g)
}

/// A lone biased GEMM: `input.q (m x k) . layer0.wq (k x n) + layer0.bq`.
pub fn build_gemm_graph(m: usize, k: usize, n: usize) -> Result<ComputeGraph> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::Params(format!("GEMM needs positive sizes, got {m}x{k}x{n}")));
    }
    let dims = ModelDims { heads: 1, head_size: k, d_model: k, d_ff: n, seq_len: m };
    let mut b = GraphBuilder { dims, nodes: Vec::new(), tensors: BTreeMap::new() };
    let a = b.tensor("input.q", DType::Int8, vec![m, k], TensorRole::Input);
    let w = b.tensor("layer0.wq", DType::Int8, vec![k, n], TensorRole::Constant);
    let bias = b.tensor("layer0.bq", DType::Int32, vec![n], TensorRole::Constant);
    let out = b.tensor("layer0.o_acc", DType::Int32, vec![m, n], TensorRole::Activation);
    b.node(0, "gemm", NodeKind::Gemm, Block::Standalone, Op::Gemm { bias: true }, vec![a, w, bias], vec![out]);
    let g = ComputeGraph { dims, layers: 1, nodes: b.nodes, tensors: b.tensors };
    g.validate()?;
    Ok(g)
}

/// A lone add & norm over `j` rows of `k` features: `layer0.o_acc` (int32)
/// is dequantized, added to `input.fp` and normalized.
pub fn build_layernorm_graph(k: usize, j: usize, scale: f32, eps: f32) -> Result<ComputeGraph> {
    if k == 0 || j == 0 {
        return Err(Error::Params(format!("layer norm needs positive sizes, got {k}x{j}")));
    }
    let dims = ModelDims { heads: 1, head_size: k, d_model: k, d_ff: k, seq_len: j };
    let mut b = GraphBuilder { dims, nodes: Vec::new(), tensors: BTreeMap::new() };
    let acc = b.tensor("layer0.o_acc", DType::Int32, vec![j, k], TensorRole::Input);
    let x = b.tensor("input.fp", DType::Fp32, vec![j, k], TensorRole::Input);
    for g in ["layer0.gamma1", "layer0.beta1"] {
        b.tensor(g, DType::Fp32, vec![k], TensorRole::Constant);
    }
    b.add_norm(0, "1", Block::Standalone, acc, x, scale, eps);
    let g = ComputeGraph { dims, layers: 1, nodes: b.nodes, tensors: b.tensors };
    g.validate()?;
    Ok(g)
}

/// Timing graph for `layers` layers with placeholder scales.
pub fn build_encoder_graph(dims: ModelDims, layers: usize) -> Result<ComputeGraph> {
    build_graph(dims, &vec![LayerConsts::unit(); layers])
}

/// Single-layer graph carrying the scales of `p`.
pub fn graph_for_params(p: &EncoderParams) -> Result<ComputeGraph> {
    p.validate()?;
    build_graph(p.dims, &[LayerConsts { scales: p.scales, eps: p.eps }])
}

pub fn graph_for_model(m: &Model) -> Result<ComputeGraph> {
    let consts: Vec<LayerConsts> = m.layers.iter().map(|p| LayerConsts { scales: p.scales, eps: p.eps }).collect();
    build_graph(m.dims, &consts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bert_base_counts() {
        let g = build_encoder_graph(ModelDims::bert_base(), 12).unwrap();
        assert_eq!(g.nodes.len(), 30 * 12);
        // 32 edges inside each layer, 4 from each layer into the next.
        assert_eq!(g.edges().len(), 32 * 12 + 4 * 11);
        let one = build_encoder_graph(ModelDims::bert_base(), 1).unwrap();
        assert_eq!((one.nodes.len(), one.edges().len()), (30, 32));
    }

    #[test]
    fn single_head_collapses_batched_gemm() {
        let dims = ModelDims { heads: 1, head_size: 16, d_model: 16, d_ff: 32, seq_len: 4 };
        let g = build_encoder_graph(dims, 1).unwrap();
        assert!(g.nodes.iter().all(|n| n.kind != NodeKind::BatchedGemm));
        assert_eq!(g.node(0, "scores").unwrap().kind, NodeKind::Gemm);
        let g = build_encoder_graph(ModelDims::tiny(), 1).unwrap();
        assert_eq!(g.node(0, "context").unwrap().kind, NodeKind::BatchedGemm);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let dims = ModelDims { heads: 3, head_size: 8, d_model: 16, d_ff: 32, seq_len: 4 };
        assert!(build_encoder_graph(dims, 1).is_err());
    }

    #[test]
    fn dtype_violation_detected() {
        let mut g = build_encoder_graph(ModelDims::tiny(), 1).unwrap();
        assert!(g.validate().is_ok());
        g.tensors.get_mut("layer0.q8").unwrap().dtype = DType::Fp32;
        let err = g.validate().unwrap_err().to_string();
        assert!(err.contains("q_split") || err.contains("q_quant"), "{err}");
    }

    #[test]
    fn back_edge_is_a_cycle() {
        let mut g = build_encoder_graph(ModelDims::tiny(), 1).unwrap();
        g.nodes[0].inputs[0] = "layer0.sa8".into();
        assert!(g.validate().unwrap_err().to_string().contains("cycle"));
    }
}

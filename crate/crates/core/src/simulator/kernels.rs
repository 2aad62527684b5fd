//! Node kernels: the reference numerics, dispatched by graph op.

use crate::error::{Error, Result};
use crate::reference::kernels::*;
use crate::reference::Value;
use crate::scheduler::Op;
use crate::tensor::{dequantize_acc, quantize, AccTensor, FpTensor, QuantTensor};

fn quant<'a>(v: &'a Value, what: &str) -> Result<&'a QuantTensor> {
    match v {
        Value::Quant(t) => Ok(t),
        other => Err(Error::ShapeMismatch(format!("{what}: expected int8, got {}", other.kind()))),
    }
}

pub(crate) fn acc<'a>(v: &'a Value, what: &str) -> Result<&'a AccTensor> {
    match v {
        Value::Acc(t) => Ok(t),
        other => Err(Error::ShapeMismatch(format!("{what}: expected int32, got {}", other.kind()))),
    }
}

fn fp<'a>(v: &'a Value, what: &str) -> Result<&'a FpTensor> {
    match v {
        Value::Fp(t) => Ok(t),
        other => Err(Error::ShapeMismatch(format!("{what}: expected fp32, got {}", other.kind()))),
    }
}

fn vector<'a>(v: &'a Value, what: &str) -> Result<&'a [f32]> {
    match v {
        Value::Vector(t) => Ok(t),
        other => Err(Error::ShapeMismatch(format!("{what}: expected fp32 vector, got {}", other.kind()))),
    }
}

/// Runs a non-GEMM node's kernel on its positional inputs.
pub fn fire(op: Op, ins: &[&Value]) -> Result<Vec<Value>> {
    let n = |i: usize| ins.get(i).copied().ok_or_else(|| Error::ShapeMismatch(format!("{op:?} is missing input {i}")));
    Ok(match op {
        Op::Requant { scale } => {
            let a = acc(n(0)?, "requant")?;
            let f = dequantize_acc(a, a.scale())?;
            let q = quantize(&f, scale)?;
            vec![Value::Fp(f), Value::Quant(q)]
        }
        Op::SplitHeads { heads, transposed } => {
            let x = quant(n(0)?, "split")?;
            let y = if transposed { split_heads_transposed(x, heads)? } else { split_heads(x, heads)? };
            vec![Value::Quant(y)]
        }
        Op::ConcatHeads => vec![Value::Quant(concat_heads(quant(n(0)?, "concat")?)?)],
        Op::SoftmaxMax { head_size } => {
            let s = acc(n(0)?, "softmax")?;
            let (x, m) = softmax_pass1_fused(s, s.scale() / (head_size as f32).sqrt())?;
            vec![Value::Fp(x), Value::Vector(m)]
        }
        Op::SoftmaxExp => {
            let (e, s) = softmax_pass2(fp(n(0)?, "softmax")?, vector(n(1)?, "softmax max")?)?;
            vec![Value::Fp(e), Value::Vector(s)]
        }
        Op::SoftmaxNorm => vec![Value::Quant(softmax_pass3_quant(fp(n(0)?, "softmax")?, vector(n(1)?, "softmax sum")?)?)],
        Op::Dequantize => {
            let a = acc(n(0)?, "dequantize")?;
            vec![Value::Fp(dequantize_acc(a, a.scale())?)]
        }
        Op::Residual => vec![Value::Fp(residual_add(fp(n(0)?, "residual")?, fp(n(1)?, "residual")?)?)],
        Op::LnMean => vec![Value::Vector(ln_mean(fp(n(0)?, "ln")?)?)],
        Op::LnVar { eps } => {
            let (gz, rstd) = ln_pass2(fp(n(0)?, "ln")?, vector(n(1)?, "ln mean")?, vector(n(2)?, "gamma")?, eps)?;
            vec![Value::Fp(gz), Value::Vector(rstd)]
        }
        Op::LnOut { scale } => {
            let out = ln_pass3(fp(n(0)?, "ln")?, vector(n(1)?, "rstd")?, vector(n(2)?, "beta")?)?;
            let q = quantize(&out, scale)?;
            vec![Value::Fp(out), Value::Quant(q)]
        }
        Op::Gelu { scale } => {
            let a = acc(n(0)?, "gelu")?;
            let f = dequantize_acc(a, a.scale())?;
            let g = gelu(&f)?;
            let q = quantize(&g, scale)?;
            vec![Value::Fp(f), Value::Fp(g), Value::Quant(q)]
        }
        Op::Gemm { .. } | Op::BatchedGemm => {
            return Err(Error::Schedule("GEMM nodes execute on the MXM model, not as kernels".into()))
        }
    })
}

/// GELU on columns `[c0, c1)` of a row-major int32 matrix with `cols` columns.
/// Elementwise, so each column block gives the same bits as the full kernel.
pub fn gelu_columns(a: &AccTensor, cols: usize, c0: usize, c1: usize, scale: f32) -> Result<Vec<Value>> {
    let rows = a.data().len() / cols;
    let w = c1 - c0;
    let data: Vec<i32> = (0..rows).flat_map(|r| a.data()[r * cols + c0..r * cols + c1].iter().copied()).collect();
    let part = AccTensor::new(data, a.scale(), crate::tensor::Shape::matrix(rows, w)?)?;
    fire(Op::Gelu { scale }, &[&Value::Acc(part)])
}

//! Golden functional model of the encoder layer.
//!
//! [`encoder`] wires the [`kernels`] together straight-line, recording every
//! node-boundary tensor into a [`Trace`]. The simulator fires the same kernels
//! from the compute graph and must reproduce each trace entry bit for bit.

pub mod encoder;
pub mod kernels;
pub mod params;

use std::collections::BTreeMap;

pub use encoder::{
    encoder_layer_fp32, encoder_layer_ref, encoder_layer_traced, encoder_stack_ref, layernorm_ref, self_attention_ref,
    softmax_ref,
};
pub use params::{generate_model, EncoderParams, LayerScales, Model, ModelDims, DEFAULT_EPS};

use crate::tensor::{dequantize, AccTensor, FpTensor, QuantTensor};

/// A tensor or per-column vector at a node boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Quant(QuantTensor),
    Acc(AccTensor),
    Fp(FpTensor),
    Vector(Vec<f32>),
}

impl Value {
    /// Bitwise equality: fp32 payloads compare by bit pattern, scales included.
    pub fn bit_eq(&self, other: &Value) -> bool {
        let bits = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        match (self, other) {
            (Value::Quant(a), Value::Quant(b)) => {
                a.shape() == b.shape() && a.data() == b.data() && a.scale().to_bits() == b.scale().to_bits()
            }
            (Value::Acc(a), Value::Acc(b)) => {
                a.shape() == b.shape() && a.data() == b.data() && a.scale().to_bits() == b.scale().to_bits()
            }
            (Value::Fp(a), Value::Fp(b)) => a.shape() == b.shape() && bits(a.data(), b.data()),
            (Value::Vector(a), Value::Vector(b)) => bits(a, b),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Quant(_) => "int8",
            Value::Acc(_) => "int32",
            Value::Fp(_) => "fp32",
            Value::Vector(_) => "fp32-vector",
        }
    }

    pub fn byte_len(&self) -> u64 {
        match self {
            Value::Quant(t) => t.data().len() as u64,
            Value::Acc(t) => 4 * t.data().len() as u64,
            Value::Fp(t) => 4 * t.data().len() as u64,
            Value::Vector(v) => 4 * v.len() as u64,
        }
    }
}

/// Node-boundary tensors keyed by `layer{l}.{name}`.
pub type Trace = BTreeMap<String, Value>;

/// The pair a layer consumes and produces: fp32 for residual adds, int8 for GEMMs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInput {
    pub fp: FpTensor,
    pub q: QuantTensor,
}

impl LayerInput {
    /// First-layer input: the fp32 side is the dequantized int8 tensor.
    pub fn from_quant(q: QuantTensor) -> Self {
        LayerInput { fp: dequantize(&q), q }
    }
}
